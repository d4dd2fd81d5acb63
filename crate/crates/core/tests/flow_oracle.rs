use cyclingnet::flow::{estimate_flow, FlowParams, GrayFrame};
use cyclingnet::imgproc::gaussian_blur;
use rand::Rng;

const SIZE: usize = 64;
const PAD: usize = 8;

fn canvas(seed: u64) -> Vec<f32> {
    let n = SIZE + 2 * PAD;
    let mut r = cyclingnet::rng::seeded(seed);
    let noise: Vec<f32> = (0..n * n).map(|_| r.random::<f32>()).collect();
    let smooth = gaussian_blur(&noise, n, n, 1, 2.0);
    let (lo, hi) = smooth.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    smooth.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Window of the canvas such that `crop(s)(p) = crop(0)(p - s)`.
fn crop(c: &[f32], sx: i64, sy: i64) -> GrayFrame {
    let n = SIZE + 2 * PAD;
    let ox = (PAD as i64 - sx) as usize;
    let oy = (PAD as i64 - sy) as usize;
    GrayFrame::from_fn(SIZE, SIZE, |x, y| c[(y + oy) * n + x + ox]).unwrap()
}

fn shifts() -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for s in 1..=5 {
        out.extend([(s, 0), (-s, 0), (0, s), (0, -s), (s, s), (-s, s)]);
    }
    out
}

#[test]
fn integer_shifts_recovered() {
    let params = FlowParams::default();
    for (k, (sx, sy)) in shifts().into_iter().enumerate() {
        let c = canvas(100 + k as u64);
        let flow = estimate_flow(&crop(&c, 0, 0), &crop(&c, sx, sy), &params).unwrap();
        let (mu, mv) = flow.interior_mean(PAD);
        let err = ((mu - sx as f64).powi(2) + (mv - sy as f64).powi(2)).sqrt();
        assert!(err < 0.5, "shift ({sx},{sy}) -> ({mu:.3},{mv:.3}) err {err:.3}");
        assert!(flow.is_finite());
    }
}

#[test]
fn swapping_frames_negates_mean_flow() {
    let params = FlowParams::default();
    for (sx, sy) in [(3, 0), (0, -2), (2, 2)] {
        let c = canvas(7);
        let a = crop(&c, 0, 0);
        let b = crop(&c, sx, sy);
        let fwd = estimate_flow(&a, &b, &params).unwrap().interior_mean(PAD);
        let bwd = estimate_flow(&b, &a, &params).unwrap().interior_mean(PAD);
        assert!((fwd.0 + bwd.0).abs() < 0.1 && (fwd.1 + bwd.1).abs() < 0.1, "{fwd:?} vs {bwd:?}");
    }
}

#[test]
fn identical_frames_have_no_motion() {
    for seed in 0..5 {
        let c = canvas(seed);
        let f = crop(&c, 0, 0);
        let flow = estimate_flow(&f, &f, &FlowParams::default()).unwrap();
        assert!(flow.max_magnitude() < 1e-3);
    }
}
