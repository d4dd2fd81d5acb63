//! Coarse-to-fine displacement estimation from polynomial expansions.
//!
//! If `next(p) = prev(p - d)` then the quadratic models satisfy
//! `b_next = b_prev - 2 A d`. With a prior displacement `d0`, each pixel
//! contributes the linear constraint `A d = -(b_next(p + d0) - b_prev(p)) / 2 + A d0`,
//! where `A` averages both frames' quadratic terms. The constraints are
//! aggregated in a Gaussian window as normal equations and solved per pixel.

use rayon::prelude::*;

use super::poly::polynomial_expansion;
use super::{FlowField, FlowParams, GrayFrame};
use crate::error::{Error, Result};
use crate::imgproc::{gaussian_blur, gaussian_taps, resize_bilinear, sample_bilinear, separable_filter};

/// Ties the solution to the prior where the window has no texture.
const PRIOR_WEIGHT: f32 = 1e-10;

fn pyramid(frame: &GrayFrame, params: &FlowParams) -> Vec<GrayFrame> {
    let min_dim = 2 * params.poly_n;
    let sigma = (1.0 / params.pyramid_scale - 1.0) * 0.5 + 0.5;
    let mut levels = vec![frame.clone()];
    while levels.len() < params.pyramid_levels {
        let last = levels.last().expect("nonempty");
        let nw = (last.width() as f64 * params.pyramid_scale).round() as usize;
        let nh = (last.height() as f64 * params.pyramid_scale).round() as usize;
        if nw.min(nh) < min_dim {
            break;
        }
        let blurred = gaussian_blur(last.data(), last.height(), last.width(), 1, sigma);
        let data = resize_bilinear(&blurred, last.height(), last.width(), 1, nh, nw)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        levels.push(GrayFrame::new(nw, nh, data).expect("valid level"));
    }
    levels
}

fn valid(p: f32, lo: f32, hi: f32) -> bool {
    p >= lo && p <= hi
}

fn window_taps(window_size: usize) -> Vec<f32> {
    let sigma = 0.3 * ((window_size as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    gaussian_taps(sigma.max(0.5), window_size / 2)
}

/// Dense flow from `prev` to `next`: `next(x + u, y + v) ≈ prev(x, y)`.
pub fn estimate_flow(prev: &GrayFrame, next: &GrayFrame, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if (prev.width(), prev.height()) != (next.width(), next.height()) {
        return Err(Error::invalid(format!(
            "frame extents differ: {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            next.width(),
            next.height()
        )));
    }
    if prev.width().min(prev.height()) < params.poly_n {
        return Err(Error::invalid(format!(
            "frame {}x{} smaller than poly_n {}",
            prev.width(),
            prev.height(),
            params.poly_n
        )));
    }
    let pyr_prev = pyramid(prev, params);
    let pyr_next = pyramid(next, params);
    let taps = window_taps(params.window_size);

    // interleaved (u, v)
    let mut flow: Vec<f32> = Vec::new();
    let mut flow_dims = (0, 0);
    for (fp, fnx) in pyr_prev.iter().zip(&pyr_next).rev() {
        let (w, h) = (fp.width(), fp.height());
        flow = if flow.is_empty() {
            vec![0.0; w * h * 2]
        } else {
            let (pw, ph) = flow_dims;
            let mut up = resize_bilinear(&flow, ph, pw, 2, h, w);
            let (sx, sy) = (w as f32 / pw as f32, h as f32 / ph as f32);
            for d in up.chunks_mut(2) {
                d[0] *= sx;
                d[1] *= sy;
            }
            up
        };
        flow_dims = (w, h);
        let r1 = polynomial_expansion(fp, params.poly_n, params.poly_sigma)?;
        let r2 = polynomial_expansion(fnx, params.poly_n, params.poly_sigma)?;
        let r2_flat: Vec<f32> = r2.coeffs.iter().flatten().copied().collect();
        let margin = (params.poly_n / 2) as f32;
        let (lo_x, hi_x) = (margin, (w - 1) as f32 - margin);
        let (lo_y, hi_y) = (margin, (h - 1) as f32 - margin);
        for _ in 0..params.iterations {
            // per pixel: g11, g12, g22, h1, h2
            let mut eqs = vec![0.0f32; w * h * 5];
            eqs.par_chunks_mut(w * 5).enumerate().for_each(|(y, row)| {
                let mut c2 = [0.0f32; 6];
                for x in 0..w {
                    let (u, v) = (flow[(y * w + x) * 2], flow[(y * w + x) * 2 + 1]);
                    // Only full-neighbourhood fits in both frames constrain the flow.
                    let (tx, ty) = (x as f32 + u, y as f32 + v);
                    if !(valid(x as f32, lo_x, hi_x) && valid(y as f32, lo_y, hi_y))
                        || !(valid(tx, lo_x, hi_x) && valid(ty, lo_y, hi_y))
                    {
                        continue;
                    }
                    let c1 = r1.at(x, y);
                    sample_bilinear(&r2_flat, h, w, 6, tx, ty, &mut c2);
                    let a11 = 0.5 * (c1[3] + c2[3]);
                    let a22 = 0.5 * (c1[4] + c2[4]);
                    let a12 = 0.5 * (c1[5] + c2[5]);
                    let db1 = -0.5 * (c2[1] - c1[1]) + a11 * u + a12 * v;
                    let db2 = -0.5 * (c2[2] - c1[2]) + a12 * u + a22 * v;
                    let e = &mut row[x * 5..x * 5 + 5];
                    e[0] = a11 * a11 + a12 * a12;
                    e[1] = a12 * (a11 + a22);
                    e[2] = a12 * a12 + a22 * a22;
                    e[3] = a11 * db1 + a12 * db2;
                    e[4] = a12 * db1 + a22 * db2;
                }
            });
            let avg = separable_filter(&eqs, h, w, 5, &taps);
            let mut next_flow = vec![0.0f32; w * h * 2];
            next_flow.par_chunks_mut(2).enumerate().for_each(|(i, d)| {
                let e = &avg[i * 5..i * 5 + 5];
                let (pu, pv) = (flow[i * 2], flow[i * 2 + 1]);
                let g11 = e[0] + PRIOR_WEIGHT;
                let g22 = e[2] + PRIOR_WEIGHT;
                let h1 = e[3] + PRIOR_WEIGHT * pu;
                let h2 = e[4] + PRIOR_WEIGHT * pv;
                let det = g11 * g22 - e[1] * e[1];
                if det.abs() > f32::MIN_POSITIVE && det.is_finite() {
                    d[0] = (g22 * h1 - e[1] * h2) / det;
                    d[1] = (g11 * h2 - e[1] * h1) / det;
                } else {
                    d[0] = pu;
                    d[1] = pv;
                }
            });
            flow = next_flow;
        }
    }
    let (w, h) = flow_dims;
    let mut field = FlowField::zeros(w, h);
    for (i, d) in flow.chunks(2).enumerate() {
        field.u[i] = d[0];
        field.v[i] = d[1];
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Smooth random texture of size `w x h`, sampled from a larger canvas
    /// with offset `(ox, oy)` so translated copies share content.
    fn texture(canvas: &[f32], cw: usize, ox: usize, oy: usize, w: usize, h: usize) -> GrayFrame {
        GrayFrame::from_fn(w, h, |x, y| canvas[(y + oy) * cw + x + ox]).unwrap()
    }

    fn canvas(size: usize, seed: u64) -> Vec<f32> {
        let mut r = crate::rng::seeded(seed);
        let noise: Vec<f32> = (0..size * size).map(|_| r.random::<f32>()).collect();
        let smooth = gaussian_blur(&noise, size, size, 1, 2.0);
        let (lo, hi) = smooth.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        smooth.iter().map(|v| (v - lo) / (hi - lo)).collect()
    }

    #[test]
    fn identical_frames_zero_flow() {
        let c = canvas(80, 1);
        let f = texture(&c, 80, 8, 8, 64, 64);
        let flow = estimate_flow(&f, &f, &FlowParams::default()).unwrap();
        assert!(flow.max_magnitude() < 1e-3);
    }

    #[test]
    fn recovers_horizontal_shift() {
        let c = canvas(80, 2);
        let prev = texture(&c, 80, 8, 8, 64, 64);
        let next = texture(&c, 80, 5, 8, 64, 64);
        let flow = estimate_flow(&prev, &next, &FlowParams::default()).unwrap();
        let (mu, mv) = flow.interior_mean(10);
        assert!((mu - 3.0).abs() < 0.5 && mv.abs() < 0.5, "mean ({mu}, {mv})");
    }

    #[test]
    fn mismatched_extents() {
        let a = GrayFrame::from_fn(20, 20, |_, _| 0.0).unwrap();
        let b = GrayFrame::from_fn(21, 20, |_, _| 0.0).unwrap();
        assert!(matches!(estimate_flow(&a, &b, &FlowParams::default()), Err(Error::InvalidArgument(_))));
    }
}
