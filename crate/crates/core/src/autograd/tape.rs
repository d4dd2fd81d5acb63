//! Linear tape of executed operations, replayed in reverse for gradients.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::kernels::{self, ConvGeometry};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeometry },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, transpose_b: bool },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Act { x: Var, kind: Activation },
    Softmax { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Reshape { x: Var },
    Narrow { x: Var, outer: usize, axis_len: usize, inner: usize, start: usize, len: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    PairwiseAdd { p: Var, q: Var, batch: usize, steps: usize, units: usize },
    Bce { probs: Var, targets: Vec<T>, weights: Vec<T> },
    Sum { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Records a forward computation. Every op method checks shapes and returns
/// the handle of its output.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// A free leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// Snapshot of a stored parameter; gradients flow back to it on
    /// [`Gradients::accumulate_into`] when it is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.leaf(p.value.clone(), p.trainable, Some(id))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(k), stride)?;
        if self.shape(b) != [geom.filters] {
            return Err(Error::shape(format!("conv2d bias must be [{}], got {:?}", geom.filters, self.shape(b))));
        }
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(k).data(), self.value(b).data());
        let value = Tensor::from_parts(geom.output_shape().to_vec(), out);
        Ok(self.push(value, Op::Conv2d { x, k, b, geom }, &[x, k, b]))
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (shape, out, argmax) = kernels::max_pool2d_forward(self.shape(x), self.value(x).data())?;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool2d { x, argmax }, &[x]))
    }

    fn check_channels(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = *self.shape(x).last().expect("rank >= 1");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm over {c} channels got gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(c)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T, batch_stats: bool) -> Var {
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let c = mean.len();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for (i, &v) in xs.iter().enumerate() {
            let ch = i % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + bt[ch]);
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, &[x, gamma, beta])
    }

    /// Normalizes by the batch statistics over all leading axes. Returns the
    /// output with the per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let c = self.check_channels(x, gamma, beta)?;
        let (mean, var) = kernels::channel_moments(self.value(x).data(), c);
        let out = self.normalize(x, gamma, beta, &mean, &var, eps, true);
        Ok((out, mean, var))
    }

    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let c = self.check_channels(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm moving statistics length mismatch"));
        }
        Ok(self.normalize(x, gamma, beta, mean, var, eps, false))
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        };
        if k != k2 {
            return Err(Error::invalid(format!("matmul inner dimensions {k} and {k2} differ")));
        }
        let out = kernels::mm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (&[batch, m, k], &[b2, r, c]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::shape("batch_matmul needs rank-3 operands"));
        };
        let (k2, n) = if transpose_b { (c, r) } else { (r, c) };
        if batch != b2 || k != k2 {
            return Err(Error::shape(format!(
                "batch_matmul {:?} x {:?} (transpose_b={transpose_b})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            out.extend(if transpose_b { kernels::mm_nt(ai, bi, m, k, n) } else { kernels::mm_nn(ai, bi, m, k, n) });
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        Ok(self.push(value, Op::BatchMatMul { a, b, batch, m, k, n, transpose_b }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds `bias` along the last axis; a length-1 bias is broadcast everywhere.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let last = *self.shape(x).last().expect("rank >= 1");
        let blen = self.value(bias).len();
        if self.rank(bias) != 1 || (blen != last && blen != 1) {
            return Err(Error::invalid(format!(
                "bias {:?} does not broadcast over {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let bd = self.value(bias).data();
        let out: Vec<T> = self.value(x).data().iter().enumerate().map(|(i, &v)| v + bd[i % blen]).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    fn rank(&self, v: Var) -> usize {
        self.shape(v).len()
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        let f = |v: T| match kind {
            Activation::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        };
        let value = self.value(x).map(f);
        self.push(value, Op::Act { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Tanh)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().expect("rank >= 1");
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let out = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let axis_len = shape[axis];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = Tensor::from_parts(oshape, out);
        Ok(self.push(value, Op::Narrow { x, outer, axis_len, inner, start, len }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape(format!("concat along {axis}: {first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let spans = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        let value = Tensor::from_parts(oshape, out);
        Ok(self.push(value, Op::Concat { parts: spans, outer, inner }, parts))
    }

    /// `out[b, t, s, :] = p[b, t, :] + q[b, s, :]`.
    pub fn pairwise_add(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "pairwise_add")?;
        let &[batch, steps, units] = self.shape(p) else {
            return Err(Error::shape("pairwise_add needs [B,T,U] operands"));
        };
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let mut out = Vec::with_capacity(batch * steps * steps * units);
        for b in 0..batch {
            for t in 0..steps {
                let prow = &pd[(b * steps + t) * units..][..units];
                for s in 0..steps {
                    let qrow = &qd[(b * steps + s) * units..][..units];
                    out.extend(prow.iter().zip(qrow).map(|(&x, &y)| x + y));
                }
            }
        }
        let value = Tensor::from_parts(vec![batch, steps, steps, units], out);
        Ok(self.push(value, Op::PairwiseAdd { p, q, batch, steps, units }, &[p, q]))
    }

    /// Weighted mean binary cross-entropy of probabilities against 0/1
    /// targets. Probabilities are clamped to `[1e-7, 1 - 1e-7]` first.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[T], weights: Option<&[T]>) -> Result<Var> {
        let n = self.value(probs).len();
        if targets.len() != n || weights.is_some_and(|w| w.len() != n) {
            return Err(Error::shape(format!("{n} probabilities but {} targets", targets.len())));
        }
        let weights = weights.map_or_else(|| vec![T::one(); n], <[T]>::to_vec);
        let (lo, hi) = (T::of(PROB_CLAMP), T::one() - T::of(PROB_CLAMP));
        let loss: T = self
            .value(probs)
            .data()
            .iter()
            .zip(targets)
            .zip(&weights)
            .map(|((&y, &t), &w)| {
                let y = y.max(lo).min(hi);
                -w * (t * y.ln() + (T::one() - t) * (T::one() - y).ln())
            })
            .sum::<T>()
            / T::of(n as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { probs, targets: targets.to_vec(), weights }, &[probs]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Hash of every piecewise branch taken so far: ReLU input signs, max-pool
    /// winners and probability clamps. Two runs of the same graph with equal
    /// signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Act { x, kind: Activation::Relu } => {
                    i.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Bce { probs, .. } => {
                    i.hash(&mut h);
                    let (lo, hi) = (T::of(PROB_CLAMP), T::one() - T::of(PROB_CLAMP));
                    for &v in self.value(*probs).data() {
                        (v < lo, v > hi).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`. Visits every recorded node once,
    /// newest first.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![T::one()]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let dyd = dy.data();
        let mut acc = |v: Var, g: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let shape = self.shape(v).to_vec();
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g) {
                        *e = *e + x;
                    }
                }
                slot => *slot = Some(Tensor::from_parts(shape, g)),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, geom } => {
                if self.wants(*x) {
                    acc(*x, kernels::conv2d_backward_input(geom, self.value(*k).data(), dyd));
                }
                if self.wants(*k) || self.wants(*b) {
                    let (dk, db) = kernels::conv2d_backward_params(geom, self.value(*x).data(), dyd);
                    acc(*k, dk);
                    acc(*b, db);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&i, &g) in argmax.iter().zip(dyd) {
                    dx[i] = dx[i] + g;
                }
                acc(*x, dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, (&d, &h)) in dyd.iter().zip(xhat).enumerate() {
                    dgamma[i % c] = dgamma[i % c] + d * h;
                    dbeta[i % c] = dbeta[i % c] + d;
                }
                if self.wants(*x) {
                    let dx: Vec<T> = if *batch_stats {
                        let count = T::of((dyd.len() / c) as f64);
                        dyd.iter()
                            .zip(xhat)
                            .enumerate()
                            .map(|(i, (&d, &h))| {
                                let ch = i % c;
                                g[ch] * inv_std[ch] * (d - dbeta[ch] / count - h * dgamma[ch] / count)
                            })
                            .collect()
                    } else {
                        dyd.iter().enumerate().map(|(i, &d)| d * g[i % c] * inv_std[i % c]).collect()
                    };
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    acc(*a, kernels::mm_nt(dyd, self.value(*b).data(), *m, *n, *k));
                }
                if self.wants(*b) {
                    acc(*b, kernels::mm_tn(self.value(*a).data(), dyd, *k, *m, *n));
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n, transpose_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut da = Vec::with_capacity(ad.len());
                let mut db = Vec::with_capacity(bd.len());
                for i in 0..*batch {
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    let gi = &dyd[i * m * n..(i + 1) * m * n];
                    if *transpose_b {
                        // out = a * b^T with b: [n,k]
                        da.extend(kernels::mm_nn(gi, bi, m, n, k));
                        db.extend(kernels::mm_tn(gi, ai, n, m, k));
                    } else {
                        da.extend(kernels::mm_nt(gi, bi, m, n, k));
                        db.extend(kernels::mm_tn(ai, gi, k, m, n));
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add { a, b } => {
                acc(*a, dyd.to_vec());
                acc(*b, dyd.to_vec());
            }
            Op::AddBias { x, bias } => {
                acc(*x, dyd.to_vec());
                let blen = self.value(*bias).len();
                let mut db = vec![T::zero(); blen];
                for (i, &d) in dyd.iter().enumerate() {
                    db[i % blen] = db[i % blen] + d;
                }
                acc(*bias, db);
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, dyd.iter().zip(bd).map(|(&d, &v)| d * v).collect());
                acc(*b, dyd.iter().zip(ad).map(|(&d, &v)| d * v).collect());
            }
            Op::Act { x, kind } => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let dx = dyd
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(&d, (&xv, &yv))| match kind {
                        Activation::Relu => {
                            if xv > T::zero() {
                                d
                            } else {
                                T::zero()
                            }
                        }
                        Activation::Sigmoid => d * yv * (T::one() - yv),
                        Activation::Tanh => d * (T::one() - yv * yv),
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::Softmax { x } => {
                let n = *node.value.shape().last().expect("rank >= 1");
                let mut dx = Vec::with_capacity(dyd.len());
                for (yrow, drow) in node.value.data().chunks(n).zip(dyd.chunks(n)) {
                    let dot: T = yrow.iter().zip(drow).map(|(&y, &d)| y * d).sum();
                    dx.extend(yrow.iter().zip(drow).map(|(&y, &d)| y * (d - dot)));
                }
                acc(*x, dx);
            }
            Op::Dropout { x, mask } => {
                acc(*x, dyd.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::Reshape { x } => acc(*x, dyd.to_vec()),
            Op::Narrow { x, outer, axis_len, inner, start, len } => {
                let mut dx = vec![T::zero(); outer * axis_len * inner];
                for o in 0..*outer {
                    let base = (o * axis_len + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&dyd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, dx);
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    let mut dp = Vec::with_capacity(outer * w * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&dyd[base..base + w * inner]);
                    }
                    acc(p, dp);
                    offset += w;
                }
            }
            Op::PairwiseAdd { p, q, batch, steps, units } => {
                let (steps, units) = (*steps, *units);
                let mut dp = vec![T::zero(); batch * steps * units];
                let mut dq = vec![T::zero(); batch * steps * units];
                for b in 0..*batch {
                    for t in 0..steps {
                        for s in 0..steps {
                            let g = &dyd[((b * steps + t) * steps + s) * units..][..units];
                            for (u, &gv) in g.iter().enumerate() {
                                let pi = (b * steps + t) * units + u;
                                let qi = (b * steps + s) * units + u;
                                dp[pi] = dp[pi] + gv;
                                dq[qi] = dq[qi] + gv;
                            }
                        }
                    }
                }
                acc(*p, dp);
                acc(*q, dq);
            }
            Op::Bce { probs, targets, weights } => {
                let (lo, hi) = (T::of(PROB_CLAMP), T::one() - T::of(PROB_CLAMP));
                let scale = dyd[0] / T::of(targets.len() as f64);
                let dx = self
                    .value(*probs)
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&y, &t), &w)| {
                        if y < lo || y > hi {
                            T::zero()
                        } else {
                            -scale * w * (t / y - (T::one() - t) / (T::one() - y))
                        }
                    })
                    .collect();
                acc(*probs, dx);
            }
            Op::Sum { x } => {
                acc(*x, vec![dyd[0]; self.value(*x).len()]);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter leaf's gradient into the store's `grad` buffers.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                let p = store.get_mut(id);
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
    }
}

/// Runs the reverse sweep and writes parameter gradients into `store`.
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
    let grads = tape.backward(loss)?;
    grads.accumulate_into(tape, store);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_at_zero_weight() {
        let xs = [0.5, -1.5, 2.0];
        let mut tape = Tape::new();
        let w = tape.variable(t(&[1, 3], &[0.0; 3]));
        let x = tape.input(t(&[3, 1], &xs));
        let z = tape.matmul(w, x).unwrap();
        let y = tape.sigmoid(z);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        let gw = g.get(w).unwrap().data();
        for (gv, xv) in gw.iter().zip(xs) {
            assert!((gv - 0.25 * xv).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn identity_conv() {
        let data: Vec<f32> = (0..12).map(|v| v as f32 * 0.25).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::new(vec![1, 3, 4, 1], data.clone()).unwrap());
        let k = tape.input(Tensor::full(vec![1, 1, 1, 1], 1.0));
        let b = tape.input(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_kernel_too_large() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(vec![1, 3, 3, 1]));
        let k = tape.input(Tensor::zeros(vec![5, 5, 1, 1]));
        let b = tape.input(Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv2d(x, k, b, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pool_shapes_from_table() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(vec![1, 57, 77, 36]));
        let y = tape.max_pool2d(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 28, 38, 36]);
        let x = tape.input(Tensor::zeros(vec![1, 3, 5, 128]));
        let y = tape.max_pool2d(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 128]);
    }

    #[test]
    fn batch_norm_modes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[2, 1], &[-1.0, 1.0]));
        let g = tape.input(t(&[1], &[1.0]));
        let b = tape.input(t(&[1], &[0.0]));
        let (y, mean, var) = tape.batch_norm_train(x, g, b, 0.001).unwrap();
        assert_eq!((mean[0], var[0]), (0.0, 1.0));
        let expected = 1.0 / 1.001f64.sqrt();
        assert!((tape.value(y).data()[0] + expected).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - expected).abs() < 1e-12);
        assert!((expected - 0.9995).abs() < 1e-4);

        let xs = [0.3, -2.0, 5.0];
        let x = tape.input(t(&[3, 1], &xs));
        let y = tape.batch_norm_infer(x, g, b, &[0.0], &[1.0], 0.001).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(xs) {
            assert!((o - i / 1.001f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_zero_weights_zero_output() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::full(vec![1, 64], 3.0));
        let w = tape.input(Tensor::zeros(vec![64, 1]));
        let b = tape.input(Tensor::zeros(vec![1]));
        let z = tape.matmul(x, w).unwrap();
        let y = tape.add_bias(z, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
        let bad = tape.input(Tensor::zeros(vec![63, 1]));
        assert!(matches!(tape.matmul(x, bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn activations_and_softmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[3], &[-3.0, 3.0, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 3.0, 0.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[2], 0.5);
        let c = tape.input(t(&[2, 4], &[2.5; 8]));
        let sm = tape.softmax(c);
        assert!(tape.value(sm).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn dropout_contract() {
        let mut r = rng::seeded(3);
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::full(vec![1_000_000], 1.0));
        let same = tape.dropout(x, 0.0, &mut r).unwrap();
        assert_eq!(same, x);
        let y = tape.dropout(x, 0.3, &mut r).unwrap();
        let mean = tape.value(y).data().iter().map(|&v| v as f64).sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(tape.dropout(x, 1.0, &mut r).is_err());
        assert!(tape.dropout(x, -0.1, &mut r).is_err());
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let a = tape.narrow(x, 1, 0, 1).unwrap();
        let b = tape.narrow(x, 1, 1, 2).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 24]);
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(t(&[2], &[0.5, 0.5]));
        let l = tape.binary_cross_entropy(p, &[1.0, 0.0], None).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
        let p = tape.input(t(&[1], &[1.0]));
        let l = tape.binary_cross_entropy(p, &[1.0], None).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);
        let p = tape.input(t(&[1], &[0.0]));
        let l = tape.binary_cross_entropy(p, &[1.0], None).unwrap();
        assert!(tape.value(l).data()[0].is_finite());
    }

    #[test]
    fn parameter_gradients_land_in_store() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0]), true);
        let frozen = store.add("m", t(&[2], &[1.0, 1.0]), false);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let mv = tape.param(&store, frozen);
        let y = tape.mul(wv, mv).unwrap();
        let s = tape.sum(y);
        backward(&tape, s, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[1.0, 1.0]);
        assert_eq!(store.get(frozen).grad.data(), &[0.0, 0.0]);
    }
}
