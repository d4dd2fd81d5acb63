//! Forward and backward kernels on flat row-major buffers.
//!
//! Image tensors are laid out `[batch, height, width, channels]`; kernels are
//! `[kh, kw, in_channels, filters]`. All reductions run in a fixed order so the
//! results do not depend on the rayon thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_WORK: usize = 1 << 16;

fn for_each_chunk<T: Send>(data: &mut [T], chunk: usize, parallel: bool, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if parallel {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub filters: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        let &[batch, height, width, channels] = input else {
            return Err(Error::shape(format!("conv2d input must be [B,H,W,C], got {input:?}")));
        };
        let &[kh, kw, kc, filters] = kernel else {
            return Err(Error::shape(format!("conv2d kernel must be [kh,kw,C,F], got {kernel:?}")));
        };
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if kc != channels {
            return Err(Error::shape(format!("conv2d kernel expects {kc} channels, input has {channels}")));
        }
        if kh > height || kw > width {
            return Err(Error::invalid(format!("conv2d kernel {kh}x{kw} larger than input {height}x{width}")));
        }
        Ok(Self {
            batch,
            height,
            width,
            channels,
            kh,
            kw,
            filters,
            stride,
            out_h: (height - kh) / stride + 1,
            out_w: (width - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.filters]
    }

    fn work(&self) -> usize {
        self.batch * self.out_h * self.out_w * self.kh * self.kw * self.channels * self.filters
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], k: &[T], bias: &[T]) -> Vec<T> {
    let in_sample = g.height * g.width * g.channels;
    let out_sample = g.out_h * g.out_w * g.filters;
    let mut out = vec![T::zero(); g.batch * out_sample];
    for_each_chunk(&mut out, out_sample, g.work() > PAR_WORK, |b, out| {
        let x = &x[b * in_sample..(b + 1) * in_sample];
        for oi in 0..g.out_h {
            for oj in 0..g.out_w {
                let acc = &mut out[(oi * g.out_w + oj) * g.filters..][..g.filters];
                acc.copy_from_slice(bias);
                for p in 0..g.kh {
                    let row = oi * g.stride + p;
                    for q in 0..g.kw {
                        let col = oj * g.stride + q;
                        let px = &x[(row * g.width + col) * g.channels..][..g.channels];
                        let kbase = (p * g.kw + q) * g.channels;
                        for (c, &xv) in px.iter().enumerate() {
                            let krow = &k[(kbase + c) * g.filters..][..g.filters];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a = *a + xv * kv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_backward_input<T: Scalar>(g: &ConvGeometry, k: &[T], dout: &[T]) -> Vec<T> {
    let in_sample = g.height * g.width * g.channels;
    let out_sample = g.out_h * g.out_w * g.filters;
    let mut dx = vec![T::zero(); g.batch * in_sample];
    for_each_chunk(&mut dx, in_sample, g.work() > PAR_WORK, |b, dx| {
        let dout = &dout[b * out_sample..(b + 1) * out_sample];
        for oi in 0..g.out_h {
            for oj in 0..g.out_w {
                let dy = &dout[(oi * g.out_w + oj) * g.filters..][..g.filters];
                for p in 0..g.kh {
                    let row = oi * g.stride + p;
                    for q in 0..g.kw {
                        let col = oj * g.stride + q;
                        let kbase = (p * g.kw + q) * g.channels;
                        let px = &mut dx[(row * g.width + col) * g.channels..][..g.channels];
                        for (c, d) in px.iter_mut().enumerate() {
                            let krow = &k[(kbase + c) * g.filters..][..g.filters];
                            let s: T = krow.iter().zip(dy).map(|(&kv, &dv)| kv * dv).sum();
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Returns `(dkernel, dbias)`.
pub fn conv2d_backward_params<T: Scalar>(g: &ConvGeometry, x: &[T], dout: &[T]) -> (Vec<T>, Vec<T>) {
    let in_sample = g.height * g.width * g.channels;
    let out_sample = g.out_h * g.out_w * g.filters;
    let mut dk = vec![T::zero(); g.kh * g.kw * g.channels * g.filters];
    // One kernel row (p, q, c) per chunk; each sums over the batch in order.
    for_each_chunk(&mut dk, g.filters, g.work() > PAR_WORK, |r, drow| {
        let c = r % g.channels;
        let q = (r / g.channels) % g.kw;
        let p = r / (g.channels * g.kw);
        for b in 0..g.batch {
            let x = &x[b * in_sample..(b + 1) * in_sample];
            let dout = &dout[b * out_sample..(b + 1) * out_sample];
            for oi in 0..g.out_h {
                let row = oi * g.stride + p;
                for oj in 0..g.out_w {
                    let col = oj * g.stride + q;
                    let xv = x[(row * g.width + col) * g.channels + c];
                    let dy = &dout[(oi * g.out_w + oj) * g.filters..][..g.filters];
                    for (d, &dv) in drow.iter_mut().zip(dy) {
                        *d = *d + xv * dv;
                    }
                }
            }
        }
    });
    let mut db = vec![T::zero(); g.filters];
    for px in dout.chunks(g.filters) {
        for (d, &v) in db.iter_mut().zip(px) {
            *d = *d + v;
        }
    }
    (dk, db)
}

/// 2x2 stride-2 max pooling; odd trailing rows/columns are dropped.
/// Returns the pooled values and, per output, the flat index of the winning input.
pub fn max_pool2d_forward<T: Scalar>(shape: &[usize], x: &[T]) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    let &[batch, h, w, c] = shape else {
        return Err(Error::shape(format!("max_pool2d input must be [B,H,W,C], got {shape:?}")));
    };
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("max_pool2d needs at least 2x2 input, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * oh * ow * c);
    let mut argmax = Vec::with_capacity(out.capacity());
    for b in 0..batch {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((b * h + 2 * i) * w + 2 * j) * c + ch;
                    let mut best = x[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((vec![batch, oh, ow, c], out, argmax))
}

/// `C[m,n] = A[m,k] * B[k,n]`.
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for_each_chunk(&mut c, n, m * k * n > PAR_WORK, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    });
    c
}

/// `C[m,n] = A[m,k] * B[n,k]^T`.
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for_each_chunk(&mut c, n, m * k * n > PAR_WORK, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cv = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    });
    c
}

/// `C[m,n] = A[k,m]^T * B[k,n]`.
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for_each_chunk(&mut c, n, m * k * n > PAR_WORK, |i, crow| {
        for p in 0..k {
            let av = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    });
    c
}

/// Per-channel mean and biased variance over every leading position.
pub fn channel_moments<T: Scalar>(x: &[T], channels: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((x.len() / channels) as f64);
    let mut mean = vec![T::zero(); channels];
    for px in x.chunks(channels) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![T::zero(); channels];
    for px in x.chunks(channels) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            *s = *s + (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = *s / count);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let c = mm_nn(&a, &b, 2, 3, 4);
        // transpose b to 4x3 and a to 3x2
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        assert_eq!(c, mm_nt(&a, &bt, 2, 3, 4));
        assert_eq!(c, mm_tn(&at, &b, 2, 3, 4));
        assert_eq!(c[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
    }

    #[test]
    fn pool_window_maximum() {
        let (shape, out, arg) = max_pool2d_forward(&[1, 2, 2, 1], &[1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(shape, vec![1, 1, 1, 1]);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn conv_geometry_table_shapes() {
        let g = ConvGeometry::new(&[1, 240, 320, 3], &[5, 5, 3, 24], 2).unwrap();
        assert_eq!(g.output_shape(), [1, 118, 158, 24]);
        let g = ConvGeometry::new(&[1, 12, 17, 48], &[3, 3, 48, 64], 1).unwrap();
        assert_eq!(g.output_shape(), [1, 10, 15, 64]);
        assert!(ConvGeometry::new(&[1, 2, 2, 1], &[3, 3, 1, 1], 1).is_err());
    }
}
