//! Finite-difference checks of every differentiable layer.

use rand::seq::SliceRandom;

use crate::autograd::{ParamId, Tape, Var};
use crate::error::Result;
use crate::gradcheck::{compare_slots, grad_check, project, uniform, GradCheckOptions, GradCheckReport};
use crate::network::layers::{lstm_cell, self_attention, AttentionVars, LstmVars};
use crate::network::{AttentionMode, Candidate, Mode, Model, ModelConfig};
use crate::rng;
use crate::tensor::Tensor;

/// Tolerance for single layers.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole shrunken network.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Names of the layer checks, in run order.
pub const LAYER_CHECKS: [&str; 9] = [
    "conv2d",
    "max_pool2d",
    "batch_norm",
    "dense",
    "lstm_cell/tanh",
    "lstm_cell/sigmoid",
    "self_attention/bilinear",
    "self_attention/additive",
    "full_model",
];

fn layer(name: &str, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let s = seed * 101;
    match name {
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            let inputs = [
                uniform(&[2, 7, 6, 3], -1.0, 1.0, s),
                uniform(&[3, 3, 3, 4], -0.5, 0.5, s + 1),
                uniform(&[4], -0.5, 0.5, s + 2),
            ];
            grad_check(name, &inputs, opts, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride)?;
                project(t, y, s)
            })
        }
        "max_pool2d" => {
            // distinct values spaced far beyond the difference step
            let n = 2 * 6 * 5 * 3;
            let mut values: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
            values.shuffle(&mut rng::seeded(s));
            let x = Tensor::new(vec![2, 6, 5, 3], values)?;
            grad_check(name, &[x], opts, |t, v| {
                let y = t.max_pool2d(v[0])?;
                project(t, y, s)
            })
        }
        "batch_norm" => {
            let inputs =
                [uniform(&[3, 3, 4, 2], -2.0, 2.0, s), uniform(&[2], 0.5, 1.5, s + 1), uniform(&[2], -0.5, 0.5, s + 2)];
            grad_check(name, &inputs, opts, |t, v| {
                let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-3)?;
                project(t, y, s)
            })
        }
        "dense" => {
            let inputs =
                [uniform(&[3, 5], -1.0, 1.0, s), uniform(&[5, 4], -0.7, 0.7, s + 1), uniform(&[4], -0.5, 0.5, s + 2)];
            grad_check(name, &inputs, opts, |t, v| {
                let z = t.matmul(v[0], v[1])?;
                let y = t.add_bias(z, v[2])?;
                project(t, y, s)
            })
        }
        "lstm_cell/tanh" | "lstm_cell/sigmoid" => {
            let candidate = if name.ends_with("tanh") { Candidate::Tanh } else { Candidate::Sigmoid };
            let (input, hidden) = (3, 4);
            let inputs = [
                uniform(&[2, input], -1.0, 1.0, s),
                uniform(&[2, hidden], -0.8, 0.8, s + 1),
                uniform(&[2, hidden], -1.0, 1.0, s + 2),
                uniform(&[input, 4 * hidden], -0.7, 0.7, s + 3),
                uniform(&[hidden, 4 * hidden], -0.7, 0.7, s + 4),
                uniform(&[4 * hidden], -0.5, 0.5, s + 5),
            ];
            grad_check(name, &inputs, opts, |t, v| {
                let w = LstmVars { kernel: v[3], recurrent: v[4], bias: v[5] };
                let (h, c) = lstm_cell(t, v[0], v[1], v[2], &w, candidate)?;
                let lh = project(t, h, s)?;
                let lc = project(t, c, s + 7)?;
                t.add(lh, lc)
            })
        }
        "self_attention/bilinear" | "self_attention/additive" => {
            let (steps, d, u) = (3, 4, 3);
            let mut inputs = vec![uniform(&[2, steps, d], -1.0, 1.0, s)];
            let bilinear = name.ends_with("bilinear");
            if bilinear {
                inputs.push(uniform(&[d, d], -0.6, 0.6, s + 1));
                inputs.push(uniform(&[1], -0.5, 0.5, s + 2));
            } else {
                inputs.push(uniform(&[d, u], -0.8, 0.8, s + 1));
                inputs.push(uniform(&[d, u], -0.8, 0.8, s + 2));
                inputs.push(uniform(&[u], -0.5, 0.5, s + 3));
                inputs.push(uniform(&[u, 1], -1.5, 1.5, s + 4));
                inputs.push(uniform(&[1], -0.5, 0.5, s + 5));
            }
            grad_check(name, &inputs, opts, |t, v: &[Var]| {
                let p = if bilinear {
                    AttentionVars::Bilinear { score: v[1], bias: v[2] }
                } else {
                    AttentionVars::Additive { w_t: v[1], w_x: v[2], b_h: v[3], w_a: v[4], b_a: v[5] }
                };
                let y = self_attention(t, v[0], &p)?;
                project(t, y, s)
            })
        }
        "full_model" => full_model(seed, opts),
        other => unreachable!("unknown check {other}"),
    }
}

/// Binary cross-entropy of the shrunken network on a two-sample batch in
/// training mode (fixed dropout mask), differentiated with respect to
/// every trainable parameter. Entries whose difference stencil flips a
/// ReLU or max-pool branch are not differentiable there and are skipped.
pub fn full_model(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let attention_mode = if seed % 2 == 0 { AttentionMode::Bilinear } else { AttentionMode::Additive };
    let config = ModelConfig { seed, attention_mode, ..ModelConfig::shrunken() };
    let mut model = Model::<f32>::new(config)?.cast::<f64>();
    let x = uniform(&[2, 24, 32, 3], 0.0, 1.0, seed * 31 + 1);
    let targets = [1.0, 0.0];
    let mode = Mode::Train { dropout_seed: seed * 31 + 2 };
    let loss = |model: &Model<f64>| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let pass = model.forward(&mut tape, xv, mode)?;
        let l = tape.binary_cross_entropy(pass.output, &targets, None)?;
        Ok((tape, l))
    };
    let (tape, l) = loss(&model)?;
    let base = tape.branch_signature();
    model.params.zero_grad();
    crate::autograd::backward(&tape, l, &mut model.params)?;
    let mut slots = Vec::new();
    let mut analytic = Vec::new();
    for (pi, p) in model.params.iter().enumerate() {
        if p.trainable {
            slots.extend((0..p.value.len()).map(|j| (pi, j)));
            analytic.extend_from_slice(p.grad.data());
        }
    }
    compare_slots("full_model", &analytic, opts, |slot, delta| {
        let (pi, j) = slots[slot];
        let id = ParamId(pi);
        let orig = model.params.get(id).value.data()[j];
        model.params.get_mut(id).value.data_mut()[j] = orig + delta;
        let out = loss(&model).map(|(t, l)| (t.branch_signature() == base).then(|| t.value(l).data()[0]));
        model.params.get_mut(id).value.data_mut()[j] = orig;
        out
    })
}

/// Runs `name` for seeds `0..seeds` and merges the results. A nonzero
/// `analytic_offset` in `opts` corrupts the analytic side.
pub fn check_over_seeds(name: &str, seeds: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let tolerance = if name == "full_model" { MODEL_TOLERANCE } else { LAYER_TOLERANCE };
    let opts = GradCheckOptions { tolerance, ..*opts };
    let reports = (0..seeds).map(|seed| layer(name, seed, &opts)).collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport::merge(name, reports))
}
