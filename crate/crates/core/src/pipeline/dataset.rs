use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::augment::{augment, AugmentOps};
use super::cache::FlowCache;
use super::frames::load_frame;
use super::fusion::{fuse_inputs, usable_frames, FusedSample, FLOW_LAGS};
use super::manifest::{ClipManifest, Split};
use crate::error::{Error, Result};
use crate::flow::flow_to_color;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleKey {
    pub clip_id: String,
    pub frame_index: usize,
}

/// Clip-level assignment of untagged clips; tagged clips keep their tag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitPolicy {
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitPolicy {
    /// Everything untagged goes to training.
    fn default() -> Self {
        Self { val_fraction: 0.0, test_fraction: 0.0, seed: 0 }
    }
}

impl SplitPolicy {
    pub fn assign(&self, clips: &[ClipManifest]) -> Result<HashMap<String, Split>> {
        let (v, t) = (self.val_fraction, self.test_fraction);
        if !(0.0..=1.0).contains(&v) || !(0.0..=1.0).contains(&t) || v + t > 1.0 {
            return Err(Error::invalid(format!(
                "split fractions val={v} test={t} must be in [0, 1] and sum to at most 1"
            )));
        }
        let mut out = HashMap::new();
        let mut untagged = Vec::new();
        for c in clips {
            match c.split {
                Some(s) => {
                    out.insert(c.clip_id.clone(), s);
                }
                None => untagged.push(c.clip_id.clone()),
            }
        }
        untagged.sort();
        untagged.shuffle(&mut rng::seeded(self.seed));
        let n = untagged.len();
        let n_val = (v * n as f64).round() as usize;
        let n_test = ((t * n as f64).round() as usize).min(n - n_val);
        for (i, id) in untagged.into_iter().enumerate() {
            let split = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            out.insert(id, split);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SampleKey>,
    pub val: Vec<SampleKey>,
    pub test: Vec<SampleKey>,
    pub batch_size: usize,
}

impl DatasetSplit {
    pub fn keys(&self, split: Split) -> &[SampleKey] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// One mini-batch: `x` is `B x H x W x 3`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub labels: Vec<f32>,
    pub keys: Vec<SampleKey>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetOptions {
    pub batch_size: usize,
    pub frame_size: (usize, usize),
    /// Random flips and zooms on training batches.
    pub augment: bool,
    /// Keep fused composites in memory after first use.
    pub memoize: bool,
    pub seed: u64,
}

pub struct Dataset {
    clips: HashMap<String, ClipManifest>,
    cache: FlowCache,
    pub split: DatasetSplit,
    pub options: DatasetOptions,
    memo: Option<Mutex<HashMap<SampleKey, Tensor<f32>>>>,
}

impl Dataset {
    /// Assigns clips to splits and verifies every flow the samples need is
    /// cached.
    pub fn build(
        manifests: Vec<ClipManifest>,
        cache: FlowCache,
        policy: &SplitPolicy,
        options: DatasetOptions,
    ) -> Result<Self> {
        if options.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if cache.frame_size != options.frame_size {
            return Err(Error::invalid(format!(
                "flow cache frame size {:?} differs from dataset frame size {:?}",
                cache.frame_size, options.frame_size
            )));
        }
        let assignment = policy.assign(&manifests)?;
        let mut split = DatasetSplit { batch_size: options.batch_size, ..Default::default() };
        for clip in &manifests {
            let frames = usable_frames(clip.frame_count);
            if frames.is_empty() {
                continue;
            }
            for index in 1..clip.frame_count {
                cache.check(&clip.clip_id, index)?;
            }
            let target = match assignment[&clip.clip_id] {
                Split::Train => &mut split.train,
                Split::Val => &mut split.val,
                Split::Test => &mut split.test,
            };
            target.extend(frames.map(|frame_index| SampleKey { clip_id: clip.clip_id.clone(), frame_index }));
        }
        let clips = manifests.into_iter().map(|c| (c.clip_id.clone(), c)).collect();
        let memo = options.memoize.then(|| Mutex::new(HashMap::new()));
        Ok(Self { clips, cache, split, options, memo })
    }

    pub fn clip(&self, clip_id: &str) -> Option<&ClipManifest> {
        self.clips.get(clip_id)
    }

    pub fn label(&self, key: &SampleKey) -> Result<u8> {
        let clip = self.clip(&key.clip_id).ok_or_else(|| Error::Dataset(format!("unknown clip {}", key.clip_id)))?;
        clip.labels
            .get(key.frame_index)
            .copied()
            .ok_or_else(|| Error::Dataset(format!("clip {} has no frame {}", key.clip_id, key.frame_index)))
    }

    /// Loads and fuses one sample without augmentation.
    pub fn sample(&self, key: &SampleKey) -> Result<FusedSample> {
        let label = self.label(key)?;
        if let Some(memo) = &self.memo {
            if let Some(x) = memo.lock().expect("memo lock").get(key) {
                return Ok(FusedSample {
                    x: x.clone(),
                    label,
                    clip_id: key.clip_id.clone(),
                    frame_index: key.frame_index,
                });
            }
        }
        let clip = &self.clips[&key.clip_id];
        let x = fuse_clip_frame(clip, &self.cache, key.frame_index)?;
        if let Some(memo) = &self.memo {
            memo.lock().expect("memo lock").insert(key.clone(), x.clone());
        }
        Ok(FusedSample { x, label, clip_id: key.clip_id.clone(), frame_index: key.frame_index })
    }

    /// Sample order for one epoch: training keys are reshuffled from
    /// `(seed, epoch)`, validation and test keep manifest order.
    pub fn epoch_order(&self, split: Split, epoch: usize) -> Vec<SampleKey> {
        let mut keys = self.split.keys(split).to_vec();
        if split == Split::Train {
            keys.shuffle(&mut rng::seeded(epoch_seed(self.options.seed, epoch)));
        }
        keys
    }

    pub fn batches(&self, split: Split, epoch: usize) -> Batches<'_> {
        Batches { dataset: self, split, epoch, order: self.epoch_order(split, epoch), next: 0 }
    }

    fn load_batch(&self, split: Split, epoch: usize, start: usize, keys: &[SampleKey]) -> Result<Batch> {
        let augment_on = self.options.augment && split == Split::Train;
        let samples = keys
            .par_iter()
            .enumerate()
            .map(|(i, key)| {
                let s = self.sample(key)?;
                if !augment_on {
                    return Ok(s);
                }
                let mut r = rng::seeded(epoch_seed(self.options.seed ^ 0xa5a5_a5a5, epoch) ^ (start + i) as u64);
                let ops = AugmentOps::random(&mut r);
                Ok(augment(&s, ops, r.random()))
            })
            .collect::<Result<Vec<_>>>()?;
        let (h, w) = self.options.frame_size;
        let mut data = Vec::with_capacity(samples.len() * h * w * 3);
        for s in &samples {
            data.extend_from_slice(s.x.data());
        }
        Ok(Batch {
            x: Tensor::new(vec![samples.len(), h, w, 3], data)?,
            labels: samples.iter().map(|s| s.label as f32).collect(),
            keys: keys.to_vec(),
        })
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64)
}

/// Fused composite for frame `index` of `clip` from its four preceding
/// cached flows.
pub fn fuse_clip_frame(clip: &ClipManifest, cache: &FlowCache, index: usize) -> Result<Tensor<f32>> {
    if !usable_frames(clip.frame_count).contains(&index) {
        return Err(Error::invalid(format!(
            "clip {} frame {index} has fewer than {FLOW_LAGS} preceding flows",
            clip.clip_id
        )));
    }
    let rgb = load_frame(&clip.frame_path(index)?, cache.frame_size)?;
    let colors = (0..FLOW_LAGS)
        .map(|lag| cache.read(&clip.clip_id, index - lag).map(|f| flow_to_color(&f)))
        .collect::<Result<Vec<_>>>()?;
    fuse_inputs(&rgb, &colors.iter().collect::<Vec<_>>())
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    split: Split,
    epoch: usize,
    order: Vec<SampleKey>,
    next: usize,
}

impl Batches<'_> {
    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.dataset.options.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let start = self.next;
        let end = (start + self.dataset.options.batch_size).min(self.order.len());
        self.next = end;
        Some(self.dataset.load_batch(self.split, self.epoch, start, &self.order[start..end]))
    }
}
