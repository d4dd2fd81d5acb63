//! Dense optical flow by polynomial expansion, and its hue/value rendering.

mod color;
mod farneback;
mod poly;

pub use color::{flow_to_color, hsv_to_rgb};
pub use farneback::estimate_flow;
pub use poly::{polynomial_expansion, PolyCoeffs};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Luma weights for color → intensity conversion.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Single-channel frame with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::invalid(format!("gray frame {width}x{height} with {} samples", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, data)
    }

    /// Luma of an `H x W x 3` color frame.
    pub fn from_rgb(rgb: &Tensor<f32>) -> Result<Self> {
        let &[h, w, 3] = rgb.shape() else {
            return Err(Error::shape(format!("expected HxWx3 color frame, got {:?}", rgb.shape())));
        };
        let data = rgb
            .data()
            .chunks(3)
            .map(|px| (px[0] * LUMA[0] + px[1] * LUMA[1] + px[2] * LUMA[2]).clamp(0.0, 1.0))
            .collect();
        Self::new(w, h, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Per-pixel displacement `(u, v)` in pixels per frame; `u` along columns,
/// `v` along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, u: vec![0.0; width * height], v: vec![0.0; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u.iter().zip(&self.v).map(|(u, v)| u.hypot(*v)).fold(0.0, f32::max)
    }

    /// Mean displacement over pixels at least `margin` away from every edge.
    pub fn interior_mean(&self, margin: usize) -> (f64, f64) {
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                let (u, v) = self.at(x, y);
                su += u as f64;
                sv += v as f64;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        (su / n, sv / n)
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|v| v.is_finite())
    }
}

/// Tuning knobs of the coarse-to-fine estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    pub window_size: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self { pyramid_levels: 3, pyramid_scale: 0.5, window_size: 15, iterations: 3, poly_n: 5, poly_sigma: 1.1 }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self.pyramid_levels > 0
            && self.window_size > 0
            && self.iterations > 0
            && self.poly_n > 0
            && self.poly_sigma > 0.0;
        if !positive {
            return Err(Error::invalid(format!("flow parameters must be positive: {self:?}")));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::invalid(format!("pyramid_scale must lie in (0, 1), got {}", self.pyramid_scale)));
        }
        if self.window_size % 2 == 0 || self.poly_n % 2 == 0 {
            return Err(Error::invalid("window_size and poly_n must be odd"));
        }
        Ok(())
    }

    /// Stable fingerprint used to key cached flow files.
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let canon = format!(
            "levels={};scale={:e};window={};iterations={};poly_n={};poly_sigma={:e}",
            self.pyramid_levels, self.pyramid_scale, self.window_size, self.iterations, self.poly_n, self.poly_sigma
        );
        let digest = Sha256::digest(canon.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// One flow field per consecutive frame pair: `frames.len() - 1` fields.
pub fn flows_for_clip(frames: &[GrayFrame], params: &FlowParams) -> Result<Vec<FlowField>> {
    use rayon::prelude::*;
    frames.par_windows(2).map(|pair| estimate_flow(&pair[0], &pair[1], params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        assert!(FlowParams::default().validate().is_ok());
        let even = FlowParams { window_size: 14, ..Default::default() };
        assert!(even.validate().is_err());
        let scale = FlowParams { pyramid_scale: 1.0, ..Default::default() };
        assert!(scale.validate().is_err());
        assert_ne!(FlowParams::default().fingerprint(), even.fingerprint());
        assert_eq!(FlowParams::default().fingerprint(), FlowParams::default().fingerprint());
    }

    #[test]
    fn gray_rejects_out_of_range() {
        assert!(GrayFrame::new(2, 1, vec![0.5, 1.5]).is_err());
        assert!(GrayFrame::new(2, 1, vec![0.5]).is_err());
    }

    #[test]
    fn clip_of_n_frames_gives_n_minus_one_flows() {
        let frames: Vec<GrayFrame> =
            (0..5).map(|k| GrayFrame::from_fn(24, 20, |x, y| ((x + y + k) % 7) as f32 / 7.0).unwrap()).collect();
        let flows = flows_for_clip(&frames, &FlowParams::default()).unwrap();
        assert_eq!(flows.len(), 4);
    }
}
