//! Small raster helpers on interleaved `f32` planes (`[row][col][channel]`).

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f32> {
    let r = radius as i64;
    let raw: Vec<f64> = (-r..=r).map(|o| (-((o * o) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Separable convolution with replicated borders.
pub fn separable_filter(src: &[f32], h: usize, w: usize, c: usize, taps: &[f32]) -> Vec<f32> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += t * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += t * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    out
}

pub fn gaussian_blur(src: &[f32], h: usize, w: usize, c: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    separable_filter(src, h, w, c, &gaussian_taps(sigma, radius))
}

/// Bilinear sample at fractional `(x, y)`, coordinates clamped to the raster.
pub fn sample_bilinear(src: &[f32], h: usize, w: usize, c: usize, x: f32, y: f32, out: &mut [f32]) {
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        let p00 = src[(y0 * w + x0) * c + ch];
        let p01 = src[(y0 * w + x1) * c + ch];
        let p10 = src[(y1 * w + x0) * c + ch];
        let p11 = src[(y1 * w + x1) * c + ch];
        let top = p00 + (p01 - p00) * fx;
        let bot = p10 + (p11 - p10) * fx;
        *o = top + (bot - top) * fy;
    }
}

/// Bilinear resize with pixel-center alignment; an identity-sized resize
/// returns the input unchanged.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    let mut out = vec![0.0f32; oh * ow * c];
    for y in 0..oh {
        let fy = (y as f32 + 0.5) * sy - 0.5;
        for x in 0..ow {
            let fx = (x as f32 + 0.5) * sx - 0.5;
            sample_bilinear(src, h, w, c, fx, fy, &mut out[(y * ow + x) * c..][..c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constant() {
        let src = vec![0.37f32; 9 * 7 * 2];
        let out = gaussian_blur(&src, 9, 7, 2, 1.5);
        assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn half_resize_averages_blocks() {
        let src: Vec<f32> = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let out = resize_bilinear(&src, 2, 4, 1, 1, 2);
        assert_eq!(out, vec![2.5, 4.5]);
    }
}
