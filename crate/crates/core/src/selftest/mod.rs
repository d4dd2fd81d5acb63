//! Aggregated correctness checks: gradients, the reference layer table,
//! flow oracles, fusion exactness and metric identities.

mod gradients;

use std::fmt;

use rand::Rng;

pub use gradients::{check_over_seeds, full_model, LAYER_CHECKS, LAYER_TOLERANCE, MODEL_TOLERANCE};

use crate::error::Result;
use crate::flow::{estimate_flow, FlowParams, GrayFrame};
use crate::gradcheck::GradCheckOptions;
use crate::imgproc::gaussian_blur;
use crate::network::{golden_diff, summarize, ModelConfig};
use crate::pipeline::fuse_inputs;
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::ConfusionCounts;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct SelftestOptions {
    /// Random seeds per gradient check.
    pub seeds: u64,
    /// Corrupts the analytic gradient of the named check, to prove that a
    /// broken op is caught and reported.
    pub perturb: Option<String>,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self { seeds: 20, perturb: None }
    }
}

/// Gradient check `name` over the configured seeds.
pub fn gradient_check(name: &str, opts: &SelftestOptions) -> Result<CheckResult> {
    let perturbed = opts.perturb.as_deref().is_some_and(|p| name == p || name.starts_with(&format!("{p}/")));
    let gc = GradCheckOptions { analytic_offset: if perturbed { 1e-2 } else { 0.0 }, ..Default::default() };
    let report = check_over_seeds(name, opts.seeds, &gc)?;
    let detail = format!(
        "max rel error {:.3e} (tol {:.0e}) over {} seeds, {} entries, {} skipped at kinks",
        report.max_rel_error, report.tolerance, opts.seeds, report.checked, report.skipped
    );
    Ok(CheckResult::new(format!("grad/{name}"), report.passed(), detail))
}

pub fn golden_check() -> Result<CheckResult> {
    let summary = summarize(&ModelConfig::default())?;
    let diff = golden_diff(&summary);
    let detail = if diff.is_empty() {
        format!(
            "{} layers, {} trainable / {} non-trainable",
            summary.rows.len(),
            summary.trainable,
            summary.non_trainable
        )
    } else {
        diff.join("; ")
    };
    Ok(CheckResult::new("golden/layer_table", diff.is_empty(), detail))
}

/// Smooth random texture on a `size x size` canvas, normalized to `[0, 1]`.
pub fn smooth_texture(size: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::seeded(seed);
    let noise: Vec<f32> = (0..size * size).map(|_| r.random::<f32>()).collect();
    let smooth = gaussian_blur(&noise, size, size, 1, 2.0);
    let (lo, hi) = smooth.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    smooth.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// `64 x 64` window of the texture whose content at `p` came from `p - shift`
/// relative to the window at offset `(8, 8)`.
fn shifted_window(canvas: &[f32], size: usize, shift: (i32, i32)) -> GrayFrame {
    let (ox, oy) = (8 - shift.0, 8 - shift.1);
    GrayFrame::from_fn(64, 64, |x, y| canvas[(y as i32 + oy) as usize * size + (x as i32 + ox) as usize])
        .expect("texture values in range")
}

pub const FLOW_SHIFT_TOLERANCE: f32 = 0.5;
pub const FLOW_STILL_TOLERANCE: f32 = 1e-3;
const FLOW_MARGIN: usize = 8;

/// Mean interior flow error for one translation of a smooth texture.
pub fn flow_shift_error(shift: (i32, i32), seed: u64) -> Result<f32> {
    let size = 80;
    let canvas = smooth_texture(size, seed);
    let prev = shifted_window(&canvas, size, (0, 0));
    let next = shifted_window(&canvas, size, shift);
    let flow = estimate_flow(&prev, &next, &FlowParams::default())?;
    let (mu, mv) = flow.interior_mean(FLOW_MARGIN);
    Ok((mu - shift.0 as f64).hypot(mv - shift.1 as f64) as f32)
}

pub fn flow_checks() -> Result<Vec<CheckResult>> {
    let canvas = smooth_texture(80, 1);
    let still = shifted_window(&canvas, 80, (0, 0));
    let zero = estimate_flow(&still, &still, &FlowParams::default())?.max_magnitude();
    let mut out = vec![CheckResult::new(
        "flow/identical_frames",
        zero < FLOW_STILL_TOLERANCE,
        format!("max |flow| {zero:.2e} < {FLOW_STILL_TOLERANCE:.0e}"),
    )];
    let mut worst = (0.0f32, (0, 0));
    for s in 1..=5 {
        for dir in [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, 1)] {
            let shift = (dir.0 * s, dir.1 * s);
            let err = flow_shift_error(shift, 2 + s as u64)?;
            if err >= worst.0 {
                worst = (err, shift);
            }
        }
    }
    out.push(CheckResult::new(
        "flow/translations",
        worst.0 < FLOW_SHIFT_TOLERANCE,
        format!("worst mean error {:.3} px at shift {:?} (tol {FLOW_SHIFT_TOLERANCE})", worst.0, worst.1),
    ));
    Ok(out)
}

/// Fusion against an `f64` evaluation of the blend on `samples` random
/// input sets, plus the all-ones identity.
pub fn fusion_check(samples: usize, seed: u64) -> Result<CheckResult> {
    let mut r = rng::seeded(seed);
    let shape = vec![6, 5, 3];
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let imgs: Vec<Tensor<f32>> = (0..5).map(|_| Tensor::from_fn(shape.clone(), |_| r.random::<f32>())).collect();
        let flows: Vec<&Tensor<f32>> = imgs[1..].iter().collect();
        let x = fuse_inputs(&imgs[0], &flows)?;
        for (i, &v) in x.data().iter().enumerate() {
            let exact =
                imgs[0].data()[i] as f64 / 2.0 + imgs[1..].iter().map(|f| f.data()[i] as f64).sum::<f64>() / 8.0;
            worst = worst.max((v as f64 - exact).abs());
        }
    }
    let one = Tensor::full(shape, 1.0f32);
    let ones = fuse_inputs(&one, &[&one, &one, &one, &one])?;
    let identity = ones.data().iter().all(|&v| v == 1.0);
    let bound = 4.0 * f32::EPSILON as f64;
    Ok(CheckResult::new(
        "fusion/exactness",
        worst <= bound && identity,
        format!("max deviation {worst:.2e} over {samples} inputs (bound {bound:.1e}), all-ones identity {identity}"),
    ))
}

pub fn metric_check() -> CheckResult {
    let f1 = ConfusionCounts::f1_from(0.842, 0.927);
    let counts = ConfusionCounts { tp: 50, tn: 40, fp: 5, fn_: 5 };
    let m = counts.metrics(0.0);
    let harmonic = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    let passed = (f1 - 0.883).abs() < 1e-3 && (m.f1 - harmonic).abs() < 1e-12 && (m.accuracy - 0.9).abs() < 1e-12;
    CheckResult::new("metrics/identities", passed, format!("F1(0.842, 0.927) = {f1:.4}; accuracy {:.3}", m.accuracy))
}

/// Runs every check, reporting each result to `on_result` as it finishes.
pub fn run(opts: &SelftestOptions, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let mut emit = |r: CheckResult| {
        on_result(&r);
        results.push(r);
    };
    emit(golden_check()?);
    for name in LAYER_CHECKS {
        emit(gradient_check(name, opts)?);
    }
    for r in flow_checks()? {
        emit(r);
    }
    emit(fusion_check(1000, 17)?);
    emit(metric_check());
    Ok(results)
}
