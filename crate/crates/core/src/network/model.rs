use super::config::{AttentionMode, ModelConfig};
use super::layers::{bilstm, lstm, self_attention, AttentionVars, LstmVars};
use crate::autograd::{Activation, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{he_normal_with, numel, Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub kernel: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub enum AttentionIds {
    Bilinear { score: ParamId, bias: ParamId },
    Additive { w_t: ParamId, w_x: ParamId, b_h: ParamId, w_a: ParamId, b_a: ParamId },
}

#[derive(Clone, Debug)]
pub enum LayerKind {
    Conv {
        kernel: ParamId,
        bias: ParamId,
        stride: usize,
    },
    MaxPool,
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        moving_mean: ParamId,
        moving_var: ParamId,
    },
    /// `H x W x C` feature map to a `(H * W)`-step sequence of `C` features.
    Reshape,
    Lstm {
        forward: LstmIds,
        backward: Option<LstmIds>,
    },
    Attention(AttentionIds),
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        kernel: ParamId,
        bias: ParamId,
        activation: Activation,
    },
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Per-sample output shape.
    pub output_shape: Vec<usize>,
    pub trainable_params: usize,
    pub non_trainable_params: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Batch statistics in batch norm and seeded dropout.
    Train { dropout_seed: u64 },
    /// Moving statistics, no dropout.
    Infer,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub layer: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct ForwardPass<T> {
    /// Probabilities, shape `[B]`.
    pub output: Var,
    /// Output of every layer, in layer order.
    pub activations: Vec<Var>,
    pub batch_stats: Vec<BatchStats<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    layers: Vec<Layer>,
}

struct Builder<T: Scalar> {
    params: ParamStore<T>,
    layers: Vec<Layer>,
    rng: Rng,
    shape: Vec<usize>,
}

impl<T: Scalar> Builder<T> {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let value = he_normal_with(shape, fan_in, &mut self.rng)?;
        Ok(self.params.add(name, value, true))
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64, trainable: bool) -> ParamId {
        self.params.add(name, Tensor::full(shape.to_vec(), T::of(value)), trainable)
    }

    fn push(&mut self, name: String, kind: LayerKind, output_shape: Vec<usize>) {
        let (trainable, frozen) = self.count(&kind);
        self.shape = output_shape.clone();
        self.layers.push(Layer { name, kind, output_shape, trainable_params: trainable, non_trainable_params: frozen });
    }

    fn count(&self, kind: &LayerKind) -> (usize, usize) {
        let mut ids = Vec::new();
        match kind {
            LayerKind::Conv { kernel, bias, .. } | LayerKind::Dense { kernel, bias, .. } => {
                ids.extend([*kernel, *bias])
            }
            LayerKind::BatchNorm { gamma, beta, moving_mean, moving_var } => {
                ids.extend([*gamma, *beta, *moving_mean, *moving_var])
            }
            LayerKind::Lstm { forward, backward } => {
                for l in std::iter::once(forward).chain(backward) {
                    ids.extend([l.kernel, l.recurrent, l.bias]);
                }
            }
            LayerKind::Attention(AttentionIds::Bilinear { score, bias }) => ids.extend([*score, *bias]),
            LayerKind::Attention(AttentionIds::Additive { w_t, w_x, b_h, w_a, b_a }) => {
                ids.extend([*w_t, *w_x, *b_h, *w_a, *b_a])
            }
            LayerKind::MaxPool | LayerKind::Reshape | LayerKind::Dropout { .. } | LayerKind::Flatten => {}
        }
        ids.iter().fold((0, 0), |(t, f), &id| {
            let p = self.params.get(id);
            if p.trainable {
                (t + p.value.len(), f)
            } else {
                (t, f + p.value.len())
            }
        })
    }

    fn lstm_direction(&mut self, prefix: &str, input: usize, hidden: usize, forget_bias: f64) -> Result<LstmIds> {
        let kernel = self.he(format!("{prefix}/kernel"), &[input, 4 * hidden], input)?;
        let recurrent = self.he(format!("{prefix}/recurrent_kernel"), &[hidden, 4 * hidden], hidden)?;
        let mut b = vec![T::zero(); 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::of(forget_bias));
        let bias = self.params.add(format!("{prefix}/bias"), Tensor::new(vec![4 * hidden], b)?, true);
        Ok(LstmIds { kernel, recurrent, bias })
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::<T> {
            params: ParamStore::new(),
            layers: Vec::new(),
            rng: rng::seeded(config.seed),
            shape: vec![config.input_height, config.input_width, 3],
        };
        let (mut conv_n, mut pool_n) = (0, 0);
        for block in &config.conv_blocks {
            for spec in block {
                conv_n += 1;
                let &[h, w, c] = b.shape.as_slice() else { unreachable!("feature maps are rank 3") };
                if h < spec.kernel || w < spec.kernel {
                    return Err(Error::invalid(format!(
                        "conv2d_{conv_n}: {}x{} kernel does not fit a {h}x{w} feature map",
                        spec.kernel, spec.kernel
                    )));
                }
                let out = vec![(h - spec.kernel) / spec.stride + 1, (w - spec.kernel) / spec.stride + 1, spec.filters];
                let fan_in = spec.kernel * spec.kernel * c;
                let name = format!("conv2d_{conv_n}");
                let kernel = b.he(format!("{name}/kernel"), &[spec.kernel, spec.kernel, c, spec.filters], fan_in)?;
                let bias = b.constant(format!("{name}/bias"), &[spec.filters], 0.0, true);
                b.push(name, LayerKind::Conv { kernel, bias, stride: spec.stride }, out);
            }
            pool_n += 1;
            let &[h, w, c] = b.shape.as_slice() else { unreachable!("feature maps are rank 3") };
            if h < 2 || w < 2 {
                return Err(Error::invalid(format!("max_pooling2d_{pool_n}: {h}x{w} map is too small to pool")));
            }
            b.push(format!("max_pooling2d_{pool_n}"), LayerKind::MaxPool, vec![h / 2, w / 2, c]);
            let name = format!("batch_normalization_{pool_n}");
            let gamma = b.constant(format!("{name}/gamma"), &[c], 1.0, true);
            let beta = b.constant(format!("{name}/beta"), &[c], 0.0, true);
            let moving_mean = b.constant(format!("{name}/moving_mean"), &[c], 0.0, false);
            let moving_var = b.constant(format!("{name}/moving_variance"), &[c], 1.0, false);
            let shape = b.shape.clone();
            b.push(name, LayerKind::BatchNorm { gamma, beta, moving_mean, moving_var }, shape);
        }

        let v = config.variant;
        if v.has_lstm() {
            let &[h, w, c] = b.shape.as_slice() else { unreachable!("feature maps are rank 3") };
            b.push("reshape_1".into(), LayerKind::Reshape, vec![h * w, c]);
            let steps = h * w;
            let hidden = config.lstm_hidden;
            let (name, forward, backward) = if v.bidirectional() {
                let f = b.lstm_direction("bidirectional_1/forward", c, hidden, config.forget_bias)?;
                let r = b.lstm_direction("bidirectional_1/backward", c, hidden, config.forget_bias)?;
                ("bidirectional_1", f, Some(r))
            } else {
                ("lstm_1", b.lstm_direction("lstm_1", c, hidden, config.forget_bias)?, None)
            };
            let width = if backward.is_some() { 2 * hidden } else { hidden };
            b.push(name.into(), LayerKind::Lstm { forward, backward }, vec![steps, width]);
            if v.has_attention() {
                let d = width;
                let ids = match config.attention_mode {
                    AttentionMode::Bilinear => AttentionIds::Bilinear {
                        score: b.he("attention_1/score".into(), &[d, d], d)?,
                        bias: b.constant("attention_1/bias".into(), &[1], 0.0, true),
                    },
                    AttentionMode::Additive => {
                        let u = config.attention_units;
                        AttentionIds::Additive {
                            w_t: b.he("attention_1/w_t".into(), &[d, u], d)?,
                            w_x: b.he("attention_1/w_x".into(), &[d, u], d)?,
                            b_h: b.constant("attention_1/b_h".into(), &[u], 0.0, true),
                            w_a: b.he("attention_1/w_a".into(), &[u, 1], u)?,
                            b_a: b.constant("attention_1/b_a".into(), &[1], 0.0, true),
                        }
                    }
                };
                b.push("attention_1".into(), LayerKind::Attention(ids), vec![steps, d]);
            }
            let shape = b.shape.clone();
            b.push("dropout_1".into(), LayerKind::Dropout { rate: config.dropout }, shape);
        }
        let flat = numel(&b.shape);
        b.push("flatten_1".into(), LayerKind::Flatten, vec![flat]);

        let mut width = flat;
        let widths: Vec<usize> = config.dense_widths.iter().copied().chain([1]).collect();
        for (i, &units) in widths.iter().enumerate() {
            let name = format!("dense_{}", i + 1);
            let kernel = b.he(format!("{name}/kernel"), &[width, units], width)?;
            let bias = b.constant(format!("{name}/bias"), &[units], 0.0, true);
            let last = i + 1 == widths.len();
            let activation = if last { Activation::Sigmoid } else { Activation::Relu };
            b.push(name, LayerKind::Dense { kernel, bias, activation }, vec![units]);
            if !last {
                b.push(format!("dropout_{}", i + 2), LayerKind::Dropout { rate: config.dropout }, vec![units]);
            }
            width = units;
        }
        Ok(Self { config, params: b.params, layers: b.layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.input_height, self.config.input_width, 3]
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), layers: self.layers.clone() }
    }

    fn lstm_vars(&self, tape: &mut Tape<T>, ids: &LstmIds) -> LstmVars {
        LstmVars {
            kernel: tape.param(&self.params, ids.kernel),
            recurrent: tape.param(&self.params, ids.recurrent),
            bias: tape.param(&self.params, ids.bias),
        }
    }

    /// Records the network on `tape`. `x` must be `[B, H, W, 3]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ForwardPass<T>> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.input_shape() || shape[0] == 0 {
            return Err(Error::invalid(format!(
                "model expects [B, {}, {}, 3] input, got {:?}",
                self.config.input_height, self.config.input_width, shape
            )));
        }
        let batch = shape[0];
        let eps = T::of(self.config.bn_epsilon);
        let mut dropout_rng = match mode {
            Mode::Train { dropout_seed } => Some(rng::seeded(dropout_seed)),
            Mode::Infer => None,
        };
        let mut h = x;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::new();
        for (index, layer) in self.layers.iter().enumerate() {
            h = match &layer.kind {
                LayerKind::Conv { kernel, bias, stride } => {
                    let k = tape.param(&self.params, *kernel);
                    let b = tape.param(&self.params, *bias);
                    let z = tape.conv2d(h, k, b, *stride)?;
                    tape.relu(z)
                }
                LayerKind::MaxPool => tape.max_pool2d(h)?,
                LayerKind::BatchNorm { gamma, beta, moving_mean, moving_var } => {
                    let g = tape.param(&self.params, *gamma);
                    let bt = tape.param(&self.params, *beta);
                    match mode {
                        Mode::Train { .. } => {
                            let (y, mean, var) = tape.batch_norm_train(h, g, bt, eps)?;
                            batch_stats.push(BatchStats { layer: index, mean, var });
                            y
                        }
                        Mode::Infer => {
                            let mean = self.params.get(*moving_mean).value.data();
                            let var = self.params.get(*moving_var).value.data();
                            tape.batch_norm_infer(h, g, bt, mean, var, eps)?
                        }
                    }
                }
                LayerKind::Reshape | LayerKind::Flatten => {
                    let mut s = vec![batch];
                    s.extend(&layer.output_shape);
                    tape.reshape(h, &s)?
                }
                LayerKind::Lstm { forward, backward } => {
                    let fw = self.lstm_vars(tape, forward);
                    match backward {
                        Some(bw) => {
                            let bw = self.lstm_vars(tape, bw);
                            bilstm(tape, h, &fw, &bw, self.config.lstm_candidate)?
                        }
                        None => lstm(tape, h, &fw, self.config.lstm_candidate)?,
                    }
                }
                LayerKind::Attention(ids) => {
                    let vars = match *ids {
                        AttentionIds::Bilinear { score, bias } => AttentionVars::Bilinear {
                            score: tape.param(&self.params, score),
                            bias: tape.param(&self.params, bias),
                        },
                        AttentionIds::Additive { w_t, w_x, b_h, w_a, b_a } => AttentionVars::Additive {
                            w_t: tape.param(&self.params, w_t),
                            w_x: tape.param(&self.params, w_x),
                            b_h: tape.param(&self.params, b_h),
                            w_a: tape.param(&self.params, w_a),
                            b_a: tape.param(&self.params, b_a),
                        },
                    };
                    self_attention(tape, h, &vars)?
                }
                LayerKind::Dropout { rate } => match dropout_rng.as_mut() {
                    Some(r) => tape.dropout(h, *rate, r)?,
                    None => h,
                },
                LayerKind::Dense { kernel, bias, activation } => {
                    let k = tape.param(&self.params, *kernel);
                    let b = tape.param(&self.params, *bias);
                    let z = tape.matmul(h, k)?;
                    let z = tape.add_bias(z, b)?;
                    tape.activate(z, *activation)
                }
            };
            activations.push(h);
        }
        let output = tape.reshape(h, &[batch])?;
        Ok(ForwardPass { output, activations, batch_stats })
    }

    /// Infer-mode probabilities for a `[B, H, W, 3]` batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let pass = self.forward(&mut tape, xv, Mode::Infer)?;
        Ok(tape.value(pass.output).data().to_vec())
    }

    /// Folds training-pass batch statistics into the moving averages.
    pub fn update_moving_stats(&mut self, stats: &[BatchStats<T>]) {
        let m = T::of(self.config.bn_momentum);
        for s in stats {
            let LayerKind::BatchNorm { moving_mean, moving_var, .. } = self.layers[s.layer].kind else {
                continue;
            };
            for (id, batch) in [(moving_mean, &s.mean), (moving_var, &s.var)] {
                let p = self.params.get_mut(id);
                for (v, &b) in p.value.data_mut().iter_mut().zip(batch) {
                    *v = m * *v + (T::one() - m) * b;
                }
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn non_trainable_count(&self) -> usize {
        self.params.non_trainable_count()
    }
}
