use rand::Rng;

use super::fusion::FusedSample;
use crate::imgproc::sample_bilinear;
use crate::rng;
use crate::tensor::Tensor;

/// Range of the random zoom factor.
pub const SCALE_RANGE: (f32, f32) = (0.9, 1.1);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentOps {
    pub horizontal_flip: bool,
    pub scale: bool,
}

impl AugmentOps {
    pub const ALL: Self = Self { horizontal_flip: true, scale: true };

    /// Each op independently with probability one half.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { horizontal_flip: rng.random_bool(0.5), scale: rng.random_bool(0.5) }
    }
}

/// Mirrors columns: column `j` moves to `W - 1 - j`.
pub fn flip_horizontal(x: &Tensor<f32>) -> Tensor<f32> {
    let &[h, w, c] = x.shape() else { panic!("expected HxWxC, got {:?}", x.shape()) };
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for row in 0..h {
        for col in (0..w).rev() {
            out.extend_from_slice(&src[(row * w + col) * c..][..c]);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Zooms about the image centre by `factor`, keeping the extent: enlargement
/// crops the border away, shrinking pads it with zeros.
pub fn scale_about_center(x: &Tensor<f32>, factor: f32) -> Tensor<f32> {
    let &[h, w, c] = x.shape() else { panic!("expected HxWxC, got {:?}", x.shape()) };
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let mut out = vec![0.0f32; h * w * c];
    for row in 0..h {
        let sy = cy + (row as f32 - cy) / factor;
        for col in 0..w {
            let sx = cx + (col as f32 - cx) / factor;
            if sy < -0.5 || sy > h as f32 - 0.5 || sx < -0.5 || sx > w as f32 - 0.5 {
                continue;
            }
            sample_bilinear(x.data(), h, w, c, sx, sy, &mut out[(row * w + col) * c..][..c]);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Applies the chosen ops; the zoom factor is drawn from `seed`.
pub fn augment(sample: &FusedSample, ops: AugmentOps, seed: u64) -> FusedSample {
    let mut x = sample.x.clone();
    if ops.scale {
        let mut r = rng::seeded(seed);
        let factor = r.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        x = scale_about_center(&x, factor);
    }
    if ops.horizontal_flip {
        x = flip_horizontal(&x);
    }
    FusedSample { x, ..sample.clone() }
}
