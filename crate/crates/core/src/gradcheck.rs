//! Analytic gradients against central finite differences, in `f64`.

use std::fmt;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is essentially zero are compared on an absolute scale.
    pub floor: f64,
    /// Added to every analytic entry before comparing. Only used to prove
    /// the harness can fail.
    pub analytic_offset: f64,
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self { tolerance, ..Self::default() }
    }
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-4, floor: 1e-6, analytic_offset: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub slot: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst: Option<Mismatch>,
    /// Entries whose difference stencil crossed a non-differentiable point
    /// and were left out.
    pub skipped: usize,
}

impl GradCheckReport {
    /// Passes when the worst compared entry is within tolerance and at most
    /// a tenth of the entries had to be skipped.
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.skipped * 10 <= self.checked + self.skipped
    }

    /// Combines per-seed reports into one keeping the worst error.
    pub fn merge(name: impl Into<String>, reports: impl IntoIterator<Item = GradCheckReport>) -> Self {
        let mut out = GradCheckReport {
            name: name.into(),
            checked: 0,
            max_rel_error: 0.0,
            tolerance: f64::INFINITY,
            worst: None,
            skipped: 0,
        };
        for r in reports {
            out.checked += r.checked;
            out.skipped += r.skipped;
            out.tolerance = out.tolerance.min(r.tolerance);
            if r.max_rel_error >= out.max_rel_error {
                out.max_rel_error = r.max_rel_error;
                out.worst = r.worst;
            }
        }
        out
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: max rel error {:.3e} (tol {:.0e}, {} entries",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.checked
        )?;
        if self.skipped > 0 {
            write!(f, ", {} skipped at kinks", self.skipped)?;
        }
        f.write_str(")")
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Core comparison: `loss_at(slot, delta)` evaluates the loss with entry
/// `slot` shifted by `delta`; `analytic[slot]` is the claimed derivative.
/// `loss_at` returns `None` when the shifted point lies on a different
/// smooth piece than the unshifted one, and that slot is skipped.
pub fn compare_slots(
    name: &str,
    analytic: &[f64],
    opts: &GradCheckOptions,
    mut loss_at: impl FnMut(usize, f64) -> Result<Option<f64>>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        name: name.to_owned(),
        checked: 0,
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
        worst: None,
        skipped: 0,
    };
    for (slot, &a) in analytic.iter().enumerate() {
        let (Some(plus), Some(minus)) = (loss_at(slot, opts.step)?, loss_at(slot, -opts.step)?) else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = a + opts.analytic_offset;
        let err = relative_error(a, numeric, opts.floor);
        if !err.is_finite() {
            return Err(Error::invalid(format!("{name}: non-finite gradient at slot {slot}")));
        }
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(Mismatch { slot, analytic: a, numeric });
        }
    }
    Ok(report)
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// entry of every input. Entries whose stencil changes a ReLU, max-pool or
/// clamp branch are skipped.
pub fn grad_check<F>(name: &str, inputs: &[Tensor<f64>], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let base = tape.branch_signature();

    let eval = |inputs: &[Tensor<f64>]| -> Result<Option<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.branch_signature() == base).then(|| tape.value(out).data()[0]))
    };
    let mut analytic = Vec::new();
    let mut slots = Vec::new();
    for (i, (v, t)) in vars.iter().zip(inputs).enumerate() {
        match grads.get(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
        slots.extend((0..t.len()).map(|j| (i, j)));
    }

    let mut work = inputs.to_vec();
    compare_slots(name, &analytic, opts, |slot, delta| {
        let (i, j) = slots[slot];
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + delta;
        let l = eval(&work);
        work[i].data_mut()[j] = orig;
        l
    })
}

/// Reduces a tensor to a scalar through a fixed random projection, so every
/// output entry contributes a distinct weight to the loss.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng::seeded(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0));
    let w = tape.input(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let x = uniform(&[4], -1.0, 1.0, 1);
        let ok = grad_check("tanh", std::slice::from_ref(&x), &GradCheckOptions::default(), |t, v| {
            let y = t.tanh(v[0]);
            project(t, y, 5)
        })
        .unwrap();
        assert!(ok.passed(), "{ok}");
        let opts = GradCheckOptions { analytic_offset: 1e-2, ..Default::default() };
        let bad = grad_check("tanh", &[x], &opts, |t, v| {
            let y = t.tanh(v[0]);
            project(t, y, 5)
        })
        .unwrap();
        assert!(!bad.passed());
    }
}
