use cyclingnet::autograd::Tape;
use cyclingnet::gradcheck::uniform;
use cyclingnet::network::layers::{attention_weights, bilstm, lstm_cell, AttentionVars, LstmVars};
use cyclingnet::network::{
    golden_diff, load_weights, save_weights, summarize, AttentionMode, Candidate, Mode, Model, ModelConfig, Summary,
    Variant, REFERENCE_ROWS,
};
use cyclingnet::{Error, Tensor};
use proptest::prelude::*;

#[test]
fn default_model_matches_reference_table() {
    let s = summarize(&ModelConfig::default()).unwrap();
    assert!(golden_diff(&s).is_empty(), "{:?}", golden_diff(&s));
    assert_eq!(s.trainable, 4_383_902);
    assert_eq!(s.non_trainable, 456);
    let conv2 = s.row("conv2d_2").unwrap();
    assert_eq!((conv2.shape.as_slice(), conv2.params), (&[57, 77, 36][..], 21_636));
    let conv5 = s.row("conv2d_5").unwrap();
    assert_eq!((conv5.shape.as_slice(), conv5.params), (&[3, 5, 128][..], 73_856));
    assert_eq!(s.row("dense_2").unwrap().params, 16_448);
    let text = s.to_string();
    assert!(text.contains("conv2d_1\t(None, 118, 158, 24)\t1824"), "{text}");
}

#[test]
fn narrow_lstm_fails_golden_on_bidirectional_row() {
    let s = summarize(&ModelConfig { lstm_hidden: 128, ..Default::default() }).unwrap();
    assert_eq!(s.row("bidirectional_1").unwrap().params, 2 * 4 * 128 * (128 + 128 + 1));
    let diff = golden_diff(&s);
    assert!(diff.iter().any(|d| d.starts_with("bidirectional_1: params 263168")), "{diff:?}");
}

fn names(variant: Variant) -> Vec<String> {
    summarize(&ModelConfig::default().with_variant(variant)).unwrap().rows.into_iter().map(|r| r.name).collect()
}

#[test]
fn variant_ladder() {
    let cnn = names(Variant::Cnn);
    let expected: Vec<&str> = REFERENCE_ROWS
        .iter()
        .map(|r| r.0)
        .filter(|n| !["reshape_1", "attention_1", "bidirectional_1", "dropout_1"].contains(n))
        .collect();
    assert_eq!(cnn, expected);

    let lstm = names(Variant::CnnLstm);
    let added: Vec<_> = lstm.iter().filter(|n| !cnn.contains(n)).collect();
    assert_eq!(added, ["reshape_1", "lstm_1", "dropout_1"]);

    let sa = names(Variant::SaCnnLstm);
    let added: Vec<_> = sa.iter().filter(|n| !lstm.contains(n)).collect();
    assert_eq!(added, ["attention_1"]);

    let bi = names(Variant::SaBiCnnLstm);
    let mut bi_sorted = bi.clone();
    bi_sorted.sort();
    let mut expected: Vec<_> =
        sa.iter().map(|n| if n == "lstm_1" { "bidirectional_1".to_string() } else { n.clone() }).collect();
    expected.sort();
    assert_eq!(bi_sorted, expected);
}

#[test]
fn full_size_forward_shapes_and_range() {
    let model = Model::<f32>::new(ModelConfig::default()).unwrap();
    let x = Tensor::from_fn(vec![1, 240, 320, 3], |i| ((i * 2654435761) % 1000) as f32 / 1000.0);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let pass = model.forward(&mut tape, xv, Mode::Infer).unwrap();
    for (layer, &act) in model.layers().iter().zip(&pass.activations) {
        let expected = REFERENCE_ROWS.iter().find(|r| r.0 == layer.name).unwrap().1;
        assert_eq!(&tape.shape(act)[1..], expected, "{}", layer.name);
    }
    let p = tape.value(pass.output).data()[0];
    assert!(p > 0.0 && p < 1.0);
    assert_eq!(model.predict(&x).unwrap(), model.predict(&x).unwrap());
}

#[test]
fn rejects_wrong_input_shape() {
    let model = Model::<f32>::new(ModelConfig::shrunken()).unwrap();
    let err = model.predict(&Tensor::zeros(vec![2, 24, 31, 3])).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

fn shrunken_batch(n: usize, seed: u64) -> Tensor<f32> {
    uniform(&[n, 24, 32, 3], 0.0, 1.0, seed).cast()
}

#[test]
fn every_variant_outputs_probabilities() {
    for v in Variant::ALL {
        for mode in [AttentionMode::Bilinear, AttentionMode::Additive] {
            let cfg = ModelConfig { attention_mode: mode, ..ModelConfig::shrunken().with_variant(v) };
            let model = Model::<f32>::new(cfg).unwrap();
            let p = model.predict(&shrunken_batch(3, 1)).unwrap();
            assert_eq!(p.len(), 3);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0), "{v:?} {p:?}");
        }
    }
}

#[test]
fn weights_roundtrip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let cfg = ModelConfig { seed: 5, ..ModelConfig::shrunken() };
    let model = Model::<f32>::new(cfg.clone()).unwrap();
    save_weights(&model, &path).unwrap();
    let mut other = Model::<f32>::new(ModelConfig { seed: 6, ..cfg }).unwrap();
    let x = shrunken_batch(2, 3);
    assert_ne!(model.predict(&x).unwrap(), other.predict(&x).unwrap());
    load_weights(&mut other, &path).unwrap();
    for (a, b) in model.params.iter().zip(other.params.iter()) {
        assert_eq!(a.value, b.value);
    }
    let (pa, pb) = (model.predict(&x).unwrap(), other.predict(&x).unwrap());
    assert!(pa.iter().zip(&pb).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn weights_reject_wrong_architecture_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let full = Model::<f32>::new(ModelConfig::shrunken()).unwrap();
    save_weights(&full, &path).unwrap();

    let mut cnn = Model::<f32>::new(ModelConfig::shrunken().with_variant(Variant::Cnn)).unwrap();
    let err = load_weights(&mut cnn, &path).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    let mut target = Model::<f32>::new(ModelConfig { seed: 9, ..ModelConfig::shrunken() }).unwrap();
    let before: Vec<_> = target.params.iter().map(|p| p.value.clone()).collect();
    assert!(matches!(load_weights(&mut target, &path), Err(Error::WeightFormat(_))));
    assert!(target.params.iter().zip(&before).all(|(p, b)| &p.value == b));

    bytes[0] = b'C';
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    let err = load_weights(&mut target, &path).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");
    assert!(target.params.iter().zip(&before).all(|(p, b)| &p.value == b));
}

#[test]
fn moving_statistics_follow_momentum() {
    let mut model = Model::<f32>::new(ModelConfig::shrunken()).unwrap();
    let mut tape = Tape::new();
    let x = tape.input(shrunken_batch(4, 2));
    let pass = model.forward(&mut tape, x, Mode::Train { dropout_seed: 1 }).unwrap();
    assert_eq!(pass.batch_stats.len(), 3);
    let first = pass.batch_stats[0].clone();
    model.update_moving_stats(&pass.batch_stats);
    let mean = &model.params.iter().find(|p| p.name == "batch_normalization_1/moving_mean").unwrap().value;
    let var = &model.params.iter().find(|p| p.name == "batch_normalization_1/moving_variance").unwrap().value;
    for c in 0..4 {
        assert!((mean.data()[c] - 0.01 * first.mean[c]).abs() < 1e-6);
        assert!((var.data()[c] - (0.99 + 0.01 * first.var[c])).abs() < 1e-6);
    }
    assert!(model.params.iter().filter(|p| !p.trainable).all(|p| p.name.contains("moving")));
}

#[test]
fn summary_prints_no_recurrent_rows_for_cnn() {
    let s: Summary = summarize(&ModelConfig::default().with_variant(Variant::Cnn)).unwrap();
    let text = s.to_string();
    assert!(!text.contains("attention") && !text.contains("bidirectional") && !text.contains("lstm"));
}

fn lstm_vars(tape: &mut Tape<f64>, input: usize, hidden: usize, seed: u64) -> LstmVars {
    LstmVars {
        kernel: tape.input(uniform(&[input, 4 * hidden], -0.6, 0.6, seed)),
        recurrent: tape.input(uniform(&[hidden, 4 * hidden], -0.6, 0.6, seed + 1)),
        bias: tape.input(uniform(&[4 * hidden], -0.6, 0.6, seed + 2)),
    }
}

#[test]
fn bilstm_palindrome_symmetry() {
    let (b, steps, d, h) = (2, 5, 3, 4);
    let half = uniform(&[b, 3, d], -1.0, 1.0, 8);
    // x_t == x_{T-1-t}
    let seq = Tensor::from_fn(vec![b, steps, d], |i| {
        let (bi, t, k) = (i / (steps * d), (i / d) % steps, i % d);
        let t = t.min(steps - 1 - t);
        half.data()[(bi * 3 + t) * d + k]
    });
    let mut tape = Tape::new();
    let x = tape.input(seq);
    let w = lstm_vars(&mut tape, d, h, 40);
    let y = bilstm(&mut tape, x, &w, &w, Candidate::Tanh).unwrap();
    let out = tape.value(y).data();
    for bi in 0..b {
        for t in 0..steps {
            let row = |t: usize| &out[(bi * steps + t) * 2 * h..][..2 * h];
            let (a, r) = (row(t), row(steps - 1 - t));
            for k in 0..h {
                assert!((a[k] - r[h + k]).abs() < 1e-12);
                assert!((a[h + k] - r[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn bilstm_zero_params_zero_output() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(uniform(&[2, 3, 4], -1.0, 1.0, 1));
    let w = LstmVars {
        kernel: tape.input(Tensor::zeros(vec![4, 20])),
        recurrent: tape.input(Tensor::zeros(vec![5, 20])),
        bias: tape.input(Tensor::zeros(vec![20])),
    };
    let y = bilstm(&mut tape, x, &w, &w, Candidate::Tanh).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 10]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..10_000, steps in 1usize..5, additive in any::<bool>()) {
        let d = 4;
        let mut tape = Tape::<f64>::new();
        let x = tape.input(uniform(&[2, steps, d], -2.0, 2.0, seed));
        let mut v = |shape: &[usize], k: u64| tape.input(uniform(shape, -1.5, 1.5, seed * 7 + k));
        let p = if additive {
            AttentionVars::Additive { w_t: v(&[d, 3], 1), w_x: v(&[d, 3], 2), b_h: v(&[3], 3), w_a: v(&[3, 1], 4), b_a: v(&[1], 5) }
        } else {
            AttentionVars::Bilinear { score: v(&[d, d], 1), bias: v(&[1], 2) }
        };
        let a = attention_weights(&mut tape, x, &p).unwrap();
        for row in tape.value(a).data().chunks(steps) {
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn lstm_gates_and_cell_bound(seed in 0u64..10_000, steps in 1usize..8) {
        let (input, hidden) = (3, 4);
        let mut tape = Tape::<f64>::new();
        let w = LstmVars {
            kernel: tape.input(uniform(&[input, 4 * hidden], -3.0, 3.0, seed)),
            recurrent: tape.input(uniform(&[hidden, 4 * hidden], -3.0, 3.0, seed + 1)),
            bias: tape.input(uniform(&[4 * hidden], -3.0, 3.0, seed + 2)),
        };
        let mut h = tape.input(Tensor::zeros(vec![1, hidden]));
        let mut s = tape.input(Tensor::zeros(vec![1, hidden]));
        for t in 1..=steps {
            let x = tape.input(uniform(&[1, input], -5.0, 5.0, seed * 13 + t as u64));
            (h, s) = lstm_cell(&mut tape, x, h, s, &w, Candidate::Tanh).unwrap();
            prop_assert!(tape.value(s).data().iter().all(|v| v.abs() <= t as f64));
            prop_assert!(tape.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
    }
}
