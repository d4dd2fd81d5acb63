//! Generated corpus of a bright square moving over a static textured
//! background. A frame is positive when the square overlaps the central
//! third of the image in both directions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::frames::save_png;
use super::manifest::{ClipManifest, Split};
use crate::error::Result;
use crate::imgproc::gaussian_blur;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    pub square: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            train_clips: 8,
            val_clips: 2,
            test_clips: 0,
            frames_per_clip: 8,
            height: 48,
            width: 64,
            square: 12,
            seed: 7,
        }
    }
}

fn overlaps_center(x: f32, y: f32, size: usize, h: usize, w: usize) -> bool {
    let s = size as f32;
    let (x0, x1) = (w as f32 / 3.0, 2.0 * w as f32 / 3.0);
    let (y0, y1) = (h as f32 / 3.0, 2.0 * h as f32 / 3.0);
    x < x1 && x + s > x0 && y < y1 && y + s > y0
}

fn background(h: usize, w: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::seeded(seed);
    let noise: Vec<f32> = (0..h * w).map(|_| r.random::<f32>()).collect();
    let smooth = gaussian_blur(&noise, h, w, 1, 1.5);
    let (lo, hi) = smooth.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    smooth.iter().map(|v| 0.35 * (v - lo) / (hi - lo).max(1e-6)).collect()
}

impl SyntheticCorpus {
    /// Top-left corner of the square in every frame of clip `k`. Even clips
    /// cross the centre, odd clips slide along the top or bottom edge.
    fn trajectory(&self, k: usize) -> Vec<(f32, f32)> {
        let mut r = rng::seeded(self.seed.wrapping_add(1000 + k as u64));
        let (h, w, s) = (self.height as f32, self.width as f32, self.square as f32);
        let n = self.frames_per_clip;
        let speed = r.random_range(3.0f32..5.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let t0 = r.random_range(0..n.max(1)) as f32;
        if k % 2 == 0 {
            let (cx, cy) = ((w - s) / 2.0, (h - s) / 2.0);
            let slope = r.random_range(-0.5f32..0.5);
            (0..n)
                .map(|t| {
                    let dt = t as f32 - t0;
                    ((cx + speed * dt).clamp(0.0, w - s), (cy + slope * speed * dt).clamp(0.0, h - s))
                })
                .collect()
        } else {
            let y = if r.random_bool(0.5) { 1.0 } else { h - s - 1.0 };
            let x_start = r.random_range(0.0..(w - s));
            (0..n)
                .map(|t| {
                    let x = x_start + speed * t as f32;
                    let span = w - s;
                    // bounce between the walls
                    let m = x.rem_euclid(2.0 * span);
                    (if m > span { 2.0 * span - m } else { m }, y)
                })
                .collect()
        }
    }

    fn render(&self, bg: &[f32], x: f32, y: f32) -> Tensor<f32> {
        let (h, w, s) = (self.height, self.width, self.square);
        let (xi, yi) = (x.round() as usize, y.round() as usize);
        Tensor::from_fn(vec![h, w, 3], |i| {
            let (row, col, ch) = (i / (w * 3), (i / 3) % w, i % 3);
            let inside = (yi..yi + s).contains(&row) && (xi..xi + s).contains(&col);
            if inside {
                // checker texture gives the flow estimator something to track
                let checker = ((row - yi) / 3 + (col - xi) / 3) % 2;
                if checker == 0 {
                    1.0
                } else {
                    0.75
                }
            } else {
                bg[row * w + col] * [1.0, 0.9, 0.8][ch]
            }
        })
    }

    fn split_of(&self, k: usize) -> Split {
        if k < self.train_clips {
            Split::Train
        } else if k < self.train_clips + self.val_clips {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// Writes frames under `dir/frames/<clip>` and returns the path of
    /// `dir/manifest.txt`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let bg = background(self.height, self.width, self.seed);
        let mut manifest = String::from("# synthetic moving-square corpus\n");
        for k in 0..self.train_clips + self.val_clips + self.test_clips {
            let clip_id = format!("square_{k:02}");
            let rel = PathBuf::from("frames").join(&clip_id);
            let path = self.trajectory(k);
            let mut labels = Vec::with_capacity(path.len());
            for (t, &(x, y)) in path.iter().enumerate() {
                save_png(&dir.join(&rel).join(format!("{t:06}.png")), &self.render(&bg, x, y))?;
                labels.push(overlaps_center(x.round(), y.round(), self.square, self.height, self.width) as u8);
            }
            let clip = ClipManifest {
                clip_id,
                frame_directory: rel,
                frame_count: path.len(),
                labels,
                split: Some(self.split_of(k)),
                fps: Some(30.0),
            };
            writeln!(manifest, "{}", clip.to_record()).expect("string write");
        }
        let manifest_path = dir.join("manifest.txt");
        std::fs::write(&manifest_path, manifest)?;
        Ok(manifest_path)
    }
}

/// Clip of `frames` identical frames plus a one-record manifest; returns
/// the manifest path.
pub fn write_static_clip(dir: &Path, clip_id: &str, frames: usize, height: usize, width: usize) -> Result<PathBuf> {
    let bg = background(height, width, 11);
    let frame = Tensor::from_fn(vec![height, width, 3], |i| bg[i / 3]);
    let rel = PathBuf::from("frames").join(clip_id);
    for t in 0..frames {
        save_png(&dir.join(&rel).join(format!("{t:06}.png")), &frame)?;
    }
    let clip = ClipManifest {
        clip_id: clip_id.to_owned(),
        frame_directory: rel,
        frame_count: frames,
        labels: vec![0; frames],
        split: Some(Split::Test),
        fps: None,
    };
    let manifest_path = dir.join("manifest.txt");
    std::fs::write(&manifest_path, format!("{}\n", clip.to_record()))?;
    Ok(manifest_path)
}
