use log::warn;
use rayon::prelude::*;

use super::train::PredictionRecord;
use crate::error::Result;
use crate::network::Model;
use crate::pipeline::{fuse_clip_frame, usable_frames, ClipManifest, FlowCache, FIRST_USABLE_FRAME};
use crate::tensor::Tensor;

/// Per-frame predictions for one clip, from index 4 on. Missing flows are
/// computed into `cache` first. Clips too short to fuse yield no records.
pub fn predict_clip(
    model: &Model<f32>,
    clip: &ClipManifest,
    cache: &FlowCache,
    threshold: f64,
    batch_size: usize,
    with_labels: bool,
) -> Result<Vec<PredictionRecord>> {
    if clip.frame_count <= FIRST_USABLE_FRAME {
        warn!(
            "clip {} has {} frames; at least {} are needed for a prediction",
            clip.clip_id,
            clip.frame_count,
            FIRST_USABLE_FRAME + 1
        );
        return Ok(Vec::new());
    }
    cache.fill_clip(clip)?;
    let indices: Vec<usize> = usable_frames(clip.frame_count).collect();
    let (h, w) = cache.frame_size;
    let probs = indices
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * h * w * 3);
            for &i in chunk {
                data.extend_from_slice(fuse_clip_frame(clip, cache, i)?.data());
            }
            model.predict(&Tensor::new(vec![chunk.len(), h, w, 3], data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(indices
        .into_iter()
        .zip(probs.into_iter().flatten())
        .map(|(frame_index, p)| {
            let probability = f64::from(p);
            PredictionRecord {
                clip_id: clip.clip_id.clone(),
                frame_index,
                probability,
                predicted: (probability >= threshold) as u8,
                label: with_labels.then(|| clip.labels[frame_index]),
            }
        })
        .collect())
}

/// Maximal runs of consecutive positive predictions as inclusive
/// `(clip_id, first_frame, last_frame)`.
pub fn predicted_intervals(records: &[PredictionRecord]) -> Vec<(String, usize, usize)> {
    let mut out: Vec<(String, usize, usize)> = Vec::new();
    let mut prev: Option<&PredictionRecord> = None;
    for r in records {
        if r.predicted == 1 {
            let extends =
                prev.is_some_and(|p| p.predicted == 1 && p.clip_id == r.clip_id && p.frame_index + 1 == r.frame_index);
            match out.last_mut() {
                Some(last) if extends => last.2 = r.frame_index,
                _ => out.push((r.clip_id.clone(), r.frame_index, r.frame_index)),
            }
        }
        prev = Some(r);
    }
    out
}

pub fn format_intervals(intervals: &[(String, usize, usize)]) -> String {
    if intervals.is_empty() {
        return "predicted near-miss intervals: none".into();
    }
    let parts: Vec<String> = intervals.iter().map(|(c, a, b)| format!("{c}[{a}-{b}]")).collect();
    format!("predicted near-miss intervals ({}): {}", intervals.len(), parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(pred: &[u8]) -> Vec<PredictionRecord> {
        pred.iter()
            .enumerate()
            .map(|(i, &p)| PredictionRecord {
                clip_id: "c".into(),
                frame_index: 4 + i,
                probability: p as f64,
                predicted: p,
                label: None,
            })
            .collect()
    }

    #[test]
    fn intervals() {
        assert!(predicted_intervals(&recs(&[0, 0, 0])).is_empty());
        assert_eq!(predicted_intervals(&recs(&[0, 1, 0, 1])), vec![("c".into(), 5, 5), ("c".into(), 7, 7)]);
        assert_eq!(predicted_intervals(&recs(&[1, 1, 0, 1, 1, 1])), vec![("c".into(), 4, 5), ("c".into(), 7, 9)]);
        assert!(format_intervals(&[]).ends_with("none"));
    }
}
