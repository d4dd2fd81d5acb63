//! Optimization, early stopping, evaluation and per-frame prediction.

mod adam;
mod early_stop;
mod metrics;
mod predict;
mod train;

pub use adam::{Adam, AdamConfig};
pub use early_stop::{EarlyStopping, StopDecision};
pub use metrics::{sweep_thresholds, threshold_sweep, ConfusionCounts, MetricsReport};
pub use predict::{format_intervals, predict_clip, predicted_intervals};
pub use train::{
    drive_epochs, evaluate, mean_bce, predict_keys, train, train_epoch, write_history, write_predictions, EpochRecord,
    Evaluation, Monitor, PredictionRecord, TrainConfig, TrainOutcome, TrainState,
};
