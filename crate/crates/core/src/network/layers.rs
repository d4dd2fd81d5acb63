//! Recurrent and attention layers expressed as tape operations.

use super::config::Candidate;
use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One LSTM direction with fused gate matrices. Columns are grouped as
/// `[input gate | forget gate | candidate | output gate]`, `hidden` wide each.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// Input weights `[input_dim, 4 * hidden]`.
    pub kernel: Var,
    /// Recurrent weights `[hidden, 4 * hidden]`.
    pub recurrent: Var,
    /// `[4 * hidden]`.
    pub bias: Var,
}

impl LstmVars {
    pub fn hidden<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.recurrent)[0]
    }
}

/// Parameters per direction: `4 * hidden * (input_dim + hidden + 1)`.
pub fn lstm_param_count(input_dim: usize, hidden: usize) -> usize {
    4 * hidden * (input_dim + hidden + 1)
}

/// One step: `x_t` is `[B, in]`, states are `[B, hidden]`. Returns
/// `(h_t, s_t)` with
///
/// ```text
/// s_t = f * s_prev + g * candidate(z_c)
/// h_t = tanh(s_t) * q
/// ```
///
/// where the gates `g`, `f`, `q` are sigmoids of their affine maps.
pub fn lstm_cell<T: Scalar>(
    tape: &mut Tape<T>,
    x_t: Var,
    h_prev: Var,
    s_prev: Var,
    w: &LstmVars,
    candidate: Candidate,
) -> Result<(Var, Var)> {
    let hidden = w.hidden(tape);
    if tape.shape(w.kernel)[1] != 4 * hidden || tape.shape(w.bias) != [4 * hidden] {
        return Err(Error::shape(format!(
            "lstm weights {:?} / {:?} / {:?} are inconsistent",
            tape.shape(w.kernel),
            tape.shape(w.recurrent),
            tape.shape(w.bias)
        )));
    }
    let zx = tape.matmul(x_t, w.kernel)?;
    let zh = tape.matmul(h_prev, w.recurrent)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias(z, w.bias)?;
    let gate = |tape: &mut Tape<T>, k: usize, act: Activation| -> Result<Var> {
        let part = tape.narrow(z, 1, k * hidden, hidden)?;
        Ok(tape.activate(part, act))
    };
    let input_gate = gate(tape, 0, Activation::Sigmoid)?;
    let forget_gate = gate(tape, 1, Activation::Sigmoid)?;
    let cand_act = match candidate {
        Candidate::Tanh => Activation::Tanh,
        Candidate::Sigmoid => Activation::Sigmoid,
    };
    let cand = gate(tape, 2, cand_act)?;
    let output_gate = gate(tape, 3, Activation::Sigmoid)?;
    let keep = tape.mul(forget_gate, s_prev)?;
    let write = tape.mul(input_gate, cand)?;
    let s = tape.add(keep, write)?;
    let squashed = tape.tanh(s);
    let h = tape.mul(squashed, output_gate)?;
    Ok((h, s))
}

fn step<T: Scalar>(tape: &mut Tape<T>, seq: Var, t: usize) -> Result<Var> {
    let &[b, _, d] = tape.shape(seq) else {
        return Err(Error::shape(format!("expected [B,T,D] sequence, got {:?}", tape.shape(seq))));
    };
    let x = tape.narrow(seq, 1, t, 1)?;
    tape.reshape(x, &[b, d])
}

/// Runs one direction over `seq` (`[B, T, D]`) from zero states and returns
/// the hidden state of every step in input order, each `[B, hidden]`.
pub fn lstm_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    seq: Var,
    w: &LstmVars,
    candidate: Candidate,
    reverse: bool,
) -> Result<Vec<Var>> {
    let &[b, steps, _] = tape.shape(seq) else {
        return Err(Error::shape(format!("expected [B,T,D] sequence, got {:?}", tape.shape(seq))));
    };
    if steps == 0 {
        return Err(Error::invalid("empty sequence"));
    }
    let hidden = w.hidden(tape);
    let mut h = tape.input(Tensor::zeros(vec![b, hidden]));
    let mut s = tape.input(Tensor::zeros(vec![b, hidden]));
    let mut out = vec![h; steps];
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let x = step(tape, seq, t)?;
        (h, s) = lstm_cell(tape, x, h, s, w, candidate)?;
        out[t] = h;
    }
    Ok(out)
}

/// Stacks per-step `[B, F]` states into `[B, T, F]`.
pub fn stack_steps<T: Scalar>(tape: &mut Tape<T>, steps: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(steps.len());
    for &s in steps {
        let &[b, f] = tape.shape(s) else {
            return Err(Error::shape("step states must be [B,F]"));
        };
        rows.push(tape.reshape(s, &[b, 1, f])?);
    }
    tape.concat(&rows, 1)
}

/// Unidirectional LSTM returning the full sequence `[B, T, hidden]`.
pub fn lstm<T: Scalar>(tape: &mut Tape<T>, seq: Var, w: &LstmVars, candidate: Candidate) -> Result<Var> {
    let hs = lstm_sequence(tape, seq, w, candidate, false)?;
    stack_steps(tape, &hs)
}

/// Forward and backward passes concatenated per step: `[B, T, 2 * hidden]`,
/// forward half first.
pub fn bilstm<T: Scalar>(
    tape: &mut Tape<T>,
    seq: Var,
    forward: &LstmVars,
    backward: &LstmVars,
    candidate: Candidate,
) -> Result<Var> {
    let fw = lstm_sequence(tape, seq, forward, candidate, false)?;
    let bw = lstm_sequence(tape, seq, backward, candidate, true)?;
    let mut joined = Vec::with_capacity(fw.len());
    for (f, b) in fw.into_iter().zip(bw) {
        joined.push(tape.concat(&[f, b], 1)?);
    }
    stack_steps(tape, &joined)
}

#[derive(Clone, Copy, Debug)]
pub enum AttentionVars {
    /// `score [d, d]`, `bias [1]`.
    Bilinear { score: Var, bias: Var },
    /// `w_t, w_x [d, u]`, `b_h [u]`, `w_a [u, 1]`, `b_a [1]`.
    Additive { w_t: Var, w_x: Var, b_h: Var, w_a: Var, b_a: Var },
}

pub fn attention_param_count(mode: super::AttentionMode, d: usize, units: usize) -> usize {
    match mode {
        super::AttentionMode::Bilinear => d * d + 1,
        super::AttentionMode::Additive => 2 * d * units + 2 * units + 1,
    }
}

/// Attention weights `[B, T, T]`; row `t` is a distribution over `t'`.
pub fn attention_weights<T: Scalar>(tape: &mut Tape<T>, seq: Var, params: &AttentionVars) -> Result<Var> {
    let &[b, steps, d] = tape.shape(seq) else {
        return Err(Error::shape(format!("expected [B,T,D] sequence, got {:?}", tape.shape(seq))));
    };
    let flat = tape.reshape(seq, &[b * steps, d])?;
    let scores = match *params {
        AttentionVars::Bilinear { score, bias } => {
            let xm = tape.matmul(flat, score)?;
            let xm = tape.reshape(xm, &[b, steps, d])?;
            let s = tape.batch_matmul(xm, seq, true)?;
            tape.add_bias(s, bias)?
        }
        AttentionVars::Additive { w_t, w_x, b_h, w_a, b_a } => {
            let units = tape.shape(w_t)[1];
            let q = tape.matmul(flat, w_t)?;
            let q = tape.reshape(q, &[b, steps, units])?;
            let k = tape.matmul(flat, w_x)?;
            let k = tape.reshape(k, &[b, steps, units])?;
            let hsum = tape.pairwise_add(q, k)?;
            let hsum = tape.add_bias(hsum, b_h)?;
            let h = tape.tanh(hsum);
            let h = tape.reshape(h, &[b * steps * steps, units])?;
            let e = tape.matmul(h, w_a)?;
            let e = tape.add_bias(e, b_a)?;
            let e = tape.sigmoid(e);
            tape.reshape(e, &[b, steps, steps])?
        }
    };
    Ok(tape.softmax(scores))
}

/// Contexts `l_t = sum_t' a[t, t'] x_t'`, shape `[B, T, D]`.
pub fn self_attention<T: Scalar>(tape: &mut Tape<T>, seq: Var, params: &AttentionVars) -> Result<Var> {
    let a = attention_weights(tape, seq, params)?;
    tape.batch_matmul(a, seq, false)
}
