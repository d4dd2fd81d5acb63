use super::GrayFrame;
use crate::error::{Error, Result};

/// Per-pixel quadratic model `f(p) ≈ pᵀ A p + bᵀ p + c` in local offsets
/// `p = (dx, dy)` around the pixel.
#[derive(Clone, Debug)]
pub struct PolyCoeffs {
    pub width: usize,
    pub height: usize,
    /// `[c, bx, by, axx, ayy, axy]` per pixel, row-major.
    pub coeffs: Vec<[f32; 6]>,
}

impl PolyCoeffs {
    pub fn at(&self, x: usize, y: usize) -> &[f32; 6] {
        &self.coeffs[y * self.width + x]
    }

    /// `A` as `[[axx, axy], [axy, ayy]]`.
    pub fn a(&self, x: usize, y: usize) -> [[f32; 2]; 2] {
        let r = self.at(x, y);
        [[r[3], r[5]], [r[5], r[4]]]
    }

    pub fn b(&self, x: usize, y: usize) -> [f32; 2] {
        let r = self.at(x, y);
        [r[1], r[2]]
    }

    pub fn c(&self, x: usize, y: usize) -> f32 {
        self.at(x, y)[0]
    }
}

// Basis 1, x, y, x², y², xy. The stored axy is half the xy weight so A is symmetric.
fn basis(dx: f64, dy: f64) -> [f64; 6] {
    [1.0, dx, dy, dx * dx, dy * dy, dx * dy]
}

fn invert6(m: [[f64; 6]; 6]) -> Option<[[f64; 6]; 6]> {
    let mut a = m;
    let mut inv = [[0.0; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let pivot = (col..6).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let d = a[col][col];
        for k in 0..6 {
            a[col][k] /= d;
            inv[col][k] /= d;
        }
        for r in 0..6 {
            if r != col {
                let f = a[r][col];
                for k in 0..6 {
                    a[r][k] -= f * a[col][k];
                    inv[r][k] -= f * inv[col][k];
                }
            }
        }
    }
    Some(inv)
}

/// Filter taps mapping an `n x n` neighbourhood (row-major) to the six
/// least-squares coefficients under Gaussian applicability.
pub(crate) fn expansion_kernels(poly_n: usize, sigma: f64) -> Result<Vec<[f32; 6]>> {
    let r = (poly_n / 2) as i64;
    let mut gram = [[0.0f64; 6]; 6];
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let (fx, fy) = (dx as f64, dy as f64);
            let w = (-(fx * fx + fy * fy) / (2.0 * sigma * sigma)).exp();
            let phi = basis(fx, fy);
            for i in 0..6 {
                for j in 0..6 {
                    gram[i][j] += w * phi[i] * phi[j];
                }
            }
            taps.push((w, phi));
        }
    }
    let inv = invert6(gram).ok_or_else(|| Error::invalid(format!("poly_n={poly_n} too small for a quadratic fit")))?;
    Ok(taps
        .into_iter()
        .map(|(w, phi)| {
            let mut k = [0.0f32; 6];
            for (i, ki) in k.iter_mut().enumerate() {
                let v: f64 = (0..6).map(|j| inv[i][j] * phi[j]).sum();
                *ki = (v * w) as f32;
            }
            // xy weight → symmetric off-diagonal of A
            k[5] *= 0.5;
            k
        })
        .collect())
}

/// Gaussian-weighted quadratic fit around every pixel. Pixels whose
/// neighbourhood would leave the frame copy the nearest full-window fit.
pub fn polynomial_expansion(frame: &GrayFrame, poly_n: usize, poly_sigma: f64) -> Result<PolyCoeffs> {
    if poly_n < 3 || poly_n % 2 == 0 {
        return Err(Error::invalid(format!("poly_n must be odd and >= 3, got {poly_n}")));
    }
    let (w, h) = (frame.width(), frame.height());
    if w < poly_n || h < poly_n {
        return Err(Error::invalid(format!("frame {w}x{h} smaller than the {poly_n}x{poly_n} neighbourhood")));
    }
    let kernels = expansion_kernels(poly_n, poly_sigma)?;
    let r = poly_n / 2;
    let data = frame.data();
    let mut coeffs = vec![[0.0f32; 6]; w * h];
    for y in r..h - r {
        for x in r..w - r {
            let mut acc = [0.0f32; 6];
            let mut t = 0;
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    let v = data[yy * w + xx];
                    for (a, k) in acc.iter_mut().zip(&kernels[t]) {
                        *a += k * v;
                    }
                    t += 1;
                }
            }
            coeffs[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let cy = y.clamp(r, h - 1 - r);
            let cx = x.clamp(r, w - 1 - r);
            if (cx, cy) != (x, y) {
                coeffs[y * w + x] = coeffs[cy * w + cx];
            }
        }
    }
    Ok(PolyCoeffs { width: w, height: h, coeffs })
}
