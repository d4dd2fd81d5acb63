use super::FlowField;
use crate::tensor::Tensor;

/// `h` in degrees `[0, 360)`, `s` and `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [(r + m).clamp(0.0, 1.0), (g + m).clamp(0.0, 1.0), (b + m).clamp(0.0, 1.0)]
}

/// Renders direction as hue and magnitude (normalized by the field maximum)
/// as value, full saturation. Output is `H x W x 3` in `[0, 1]`.
pub fn flow_to_color(flow: &FlowField) -> Tensor<f32> {
    let max = flow.max_magnitude();
    let mut out = Vec::with_capacity(flow.width * flow.height * 3);
    for (&u, &v) in flow.u.iter().zip(&flow.v) {
        let value = if max > 0.0 { u.hypot(v) / max } else { 0.0 };
        let hue = v.atan2(u).to_degrees().rem_euclid(360.0);
        out.extend(hsv_to_rgb(hue, 1.0, value));
    }
    Tensor::from_parts(vec![flow.height, flow.width, 3], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent RGB → (hue, value) for checking.
    fn hue_value(px: &[f32]) -> (f32, f32) {
        let (r, g, b) = (px[0], px[1], px[2]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let d = max - min;
        let hue = if d == 0.0 {
            0.0
        } else if max == r {
            60.0 * ((g - b) / d).rem_euclid(6.0)
        } else if max == g {
            60.0 * ((b - r) / d + 2.0)
        } else {
            60.0 * ((r - g) / d + 4.0)
        };
        (hue, max)
    }

    fn field(u: Vec<f32>, v: Vec<f32>) -> FlowField {
        FlowField { width: u.len(), height: 1, u, v }
    }

    #[test]
    fn zero_flow_is_black() {
        let img = flow_to_color(&FlowField::zeros(5, 4));
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_flow_uniform_color() {
        let img = flow_to_color(&field(vec![1.0; 6], vec![0.0; 6]));
        let first = &img.data()[..3];
        assert!(img.data().chunks(3).all(|px| px == first));
        assert_eq!(hue_value(first).1, 1.0);
    }

    #[test]
    fn orthogonal_flows_hues_ninety_apart() {
        let img = flow_to_color(&field(vec![1.0, 0.0], vec![0.0, 1.0]));
        let (h0, v0) = hue_value(&img.data()[..3]);
        let (h1, v1) = hue_value(&img.data()[3..]);
        assert_eq!(v0, v1);
        assert!(((h1 - h0) - 90.0).abs() < 1e-3, "{h0} {h1}");
    }

    #[test]
    fn scaling_keeps_hue_and_max_value() {
        let u = vec![0.3, -1.0, 2.0];
        let v = vec![0.1, 0.5, -0.7];
        let a = flow_to_color(&field(u.clone(), v.clone()));
        let b = flow_to_color(&field(u.iter().map(|x| x * 4.0).collect(), v.iter().map(|x| x * 4.0).collect()));
        assert!(a.max_abs_diff(&b) < 1e-6);
        let values: Vec<f32> = a.data().chunks(3).map(|px| hue_value(px).1).collect();
        assert_eq!(values.iter().copied().fold(0.0, f32::max), 1.0);
    }
}
