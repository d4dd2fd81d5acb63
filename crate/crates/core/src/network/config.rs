use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture ladder, smallest first. Each step adds layers to the one
/// before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Convolution blocks and the dense head.
    Cnn,
    /// Adds a unidirectional LSTM over the spatial sequence.
    CnnLstm,
    /// Adds self-attention after the LSTM.
    SaCnnLstm,
    /// Bidirectional LSTM followed by self-attention.
    SaBiCnnLstm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cnn, Variant::CnnLstm, Variant::SaCnnLstm, Variant::SaBiCnnLstm];

    pub fn has_lstm(self) -> bool {
        self != Variant::Cnn
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::SaCnnLstm | Variant::SaBiCnnLstm)
    }

    pub fn bidirectional(self) -> bool {
        self == Variant::SaBiCnnLstm
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cnn => "cnn",
            Variant::CnnLstm => "cnn_lstm",
            Variant::SaCnnLstm => "sa_cnn_lstm",
            Variant::SaBiCnnLstm => "sa_bi_cnn_lstm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Bilinear scores `x_t^T M x_t' + b` with one `d x d` matrix and a
    /// scalar bias.
    Bilinear,
    /// Additive scores `sigmoid(W_a tanh(W_t x_t + W_x x_t' + b_h) + b_a)`.
    Additive,
}

/// Squashing applied to the LSTM cell candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidate {
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(filters: usize, kernel: usize, stride: usize) -> Self {
        Self { filters, kernel, stride }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub attention_mode: AttentionMode,
    pub lstm_candidate: Candidate,
    /// Hidden units per LSTM direction.
    pub lstm_hidden: usize,
    /// Hidden width of the additive attention form.
    pub attention_units: usize,
    pub dense_widths: Vec<usize>,
    pub dropout: f64,
    pub input_height: usize,
    pub input_width: usize,
    /// Each block is a run of ReLU convolutions followed by 2x2 max pooling
    /// and batch normalization.
    pub conv_blocks: Vec<Vec<ConvSpec>>,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub forget_bias: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The full-size network on 240x320 frames.
    fn default() -> Self {
        Self {
            variant: Variant::SaBiCnnLstm,
            attention_mode: AttentionMode::Bilinear,
            lstm_candidate: Candidate::Tanh,
            lstm_hidden: 512,
            attention_units: 512,
            dense_widths: vec![256, 64],
            dropout: 0.3,
            input_height: 240,
            input_width: 320,
            conv_blocks: vec![
                vec![ConvSpec::new(24, 5, 2), ConvSpec::new(36, 5, 2)],
                vec![ConvSpec::new(48, 5, 2), ConvSpec::new(64, 3, 1)],
                vec![ConvSpec::new(128, 3, 1)],
            ],
            bn_momentum: 0.99,
            bn_epsilon: 0.001,
            forget_bias: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Same layer types on 24x32 inputs with narrow layers; ends in a
    /// 1x2 feature map like the full model.
    pub fn shrunken() -> Self {
        Self {
            lstm_hidden: 8,
            attention_units: 6,
            dense_widths: vec![16, 8],
            input_height: 24,
            input_width: 32,
            conv_blocks: vec![vec![ConvSpec::new(4, 3, 1)], vec![ConvSpec::new(6, 3, 1)], vec![ConvSpec::new(8, 3, 1)]],
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.input_height == 0 || self.input_width == 0 {
            return bad("input size must be positive".into());
        }
        if self.conv_blocks.is_empty() || self.conv_blocks.iter().any(Vec::is_empty) {
            return bad("every convolution block needs at least one layer".into());
        }
        if let Some(c) = self.conv_blocks.iter().flatten().find(|c| c.filters == 0 || c.kernel == 0 || c.stride == 0) {
            return bad(format!("invalid convolution {c:?}"));
        }
        if self.variant.has_lstm() && self.lstm_hidden == 0 {
            return bad("lstm_hidden must be positive".into());
        }
        if self.variant.has_attention() && self.attention_mode == AttentionMode::Additive && self.attention_units == 0 {
            return bad("attention_units must be positive".into());
        }
        if self.dense_widths.contains(&0) {
            return bad("dense widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return bad("batch norm momentum must lie in [0, 1) and epsilon be positive".into());
        }
        Ok(())
    }
}
