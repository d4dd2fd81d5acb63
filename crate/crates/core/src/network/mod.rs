//! The near-miss classifier: convolution blocks, recurrent and attention
//! layers, and a dense head with a single sigmoid output.

mod config;
pub mod layers;
mod model;
mod summary;
mod weights;

pub use config::{AttentionMode, Candidate, ConvSpec, ModelConfig, Variant};
pub use layers::{attention_param_count, lstm_param_count};
pub use model::{AttentionIds, BatchStats, ForwardPass, Layer, LayerKind, LstmIds, Mode, Model};
pub use summary::{
    golden_diff, summarize, Summary, SummaryRow, REFERENCE_NON_TRAINABLE, REFERENCE_ROWS, REFERENCE_TRAINABLE,
};
pub use weights::{
    assign_weights, decode_weights, encode_weights, load_weights, save_weights, WEIGHT_MAGIC, WEIGHT_VERSION,
};
