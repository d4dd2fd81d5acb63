use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Earliest frame index with four preceding flow fields (flow `t` pairs
/// frames `t-1` and `t`).
pub const FIRST_USABLE_FRAME: usize = 4;

/// Number of lagged flow renderings blended into one sample.
pub const FLOW_LAGS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct FusedSample {
    /// `H x W x 3` composite in `[0, 1]`.
    pub x: Tensor<f32>,
    pub label: u8,
    pub clip_id: String,
    pub frame_index: usize,
}

/// Samples a clip of `frame_count` frames can yield.
pub fn usable_frames(frame_count: usize) -> std::ops::Range<usize> {
    FIRST_USABLE_FRAME..frame_count.max(FIRST_USABLE_FRAME)
}

/// `x = rgb / 2 + (flow_t + flow_{t-1} + flow_{t-2} + flow_{t-3}) / 8`.
///
/// `flow_colors` are the colorized flows ordered newest first.
pub fn fuse_inputs(rgb: &Tensor<f32>, flow_colors: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    if flow_colors.len() != FLOW_LAGS {
        return Err(Error::invalid(format!("fusion needs {FLOW_LAGS} preceding flows, got {}", flow_colors.len())));
    }
    if rgb.rank() != 3 || rgb.shape()[2] != 3 {
        return Err(Error::shape(format!("expected HxWx3 frame, got {:?}", rgb.shape())));
    }
    for (lag, f) in flow_colors.iter().enumerate() {
        if f.shape() != rgb.shape() {
            return Err(Error::shape(format!("flow at lag {lag} is {:?}, frame is {:?}", f.shape(), rgb.shape())));
        }
    }
    let in_range = |t: &Tensor<f32>| t.data().iter().all(|v| (0.0..=1.0).contains(v));
    if !in_range(rgb) || !flow_colors.iter().all(|f| in_range(f)) {
        return Err(Error::invalid("fusion inputs must lie in [0, 1]"));
    }
    let [f0, f1, f2, f3] = [flow_colors[0], flow_colors[1], flow_colors[2], flow_colors[3]].map(Tensor::data);
    let data = rgb
        .data()
        .iter()
        .enumerate()
        .map(|(i, &c)| (c / 2.0 + (f0[i] + f1[i] + f2[i] + f3[i]) / 8.0).min(1.0))
        .collect();
    Tensor::new(rgb.shape().to_vec(), data)
}
