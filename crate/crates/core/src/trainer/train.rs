use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::early_stop::EarlyStopping;
use super::metrics::{ConfusionCounts, MetricsReport};
use crate::autograd::{backward, Tape};
use crate::error::{Error, Result};
use crate::network::{Mode, Model};
use crate::pipeline::{Dataset, SampleKey, Split};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    TrainLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub threshold: f64,
    pub seed: u64,
    pub monitor: Monitor,
    /// Loss weight of positive samples; `1.0` leaves the classes balanced
    /// as they come.
    pub positive_weight: f64,
    /// Random flips and zooms on training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 100,
            early_stop_patience: 20,
            batch_size: 64,
            threshold: 0.5,
            seed: 0,
            monitor: Monitor::ValLoss,
            positive_weight: 1.0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.early_stop_patience == 0 || self.early_stop_patience >= self.max_epochs {
            return Err(Error::invalid(format!(
                "need 0 < early_stop_patience < max_epochs, got {} and {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.positive_weight.is_nan() || self.positive_weight <= 0.0 {
            return Err(Error::invalid("positive_weight must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub stopper: EarlyStopping,
    pub history: Vec<EpochRecord>,
}

/// Epoch loop with early stopping. `run_epoch(epoch)` trains one epoch and
/// returns its record; `on_improve` fires after each epoch that strictly
/// improves the monitored loss. Non-finite losses abort.
pub fn drive_epochs(
    config: &TrainConfig,
    mut run_epoch: impl FnMut(usize) -> Result<EpochRecord>,
    mut on_improve: impl FnMut(usize) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    let mut state =
        TrainState { epoch: 0, stopper: EarlyStopping::new(config.early_stop_patience), history: Vec::new() };
    for epoch in 1..=config.max_epochs {
        let rec = run_epoch(epoch)?;
        if !rec.train_loss.is_finite() || !rec.val_loss.is_finite() {
            return Err(Error::Training(format!(
                "epoch {epoch}: non-finite loss (train {}, val {}); try a lower learning rate",
                rec.train_loss, rec.val_loss
            )));
        }
        state.epoch = epoch;
        state.history.push(rec);
        let monitored = match config.monitor {
            Monitor::ValLoss => rec.val_loss,
            Monitor::TrainLoss => rec.train_loss,
        };
        let decision = state.stopper.observe(epoch, monitored);
        if decision.improved {
            on_improve(epoch)?;
        }
        if decision.stop {
            info!("early stop after epoch {epoch}; best epoch {:?}", state.stopper.best_epoch);
            break;
        }
    }
    Ok(state)
}

fn dropout_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (batch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn sample_weights(labels: &[f32], positive_weight: f64) -> Option<Vec<f32>> {
    (positive_weight != 1.0)
        .then(|| labels.iter().map(|&l| if l == 1.0 { positive_weight as f32 } else { 1.0 }).collect())
}

/// One pass over the shuffled training split; returns `(mean loss,
/// accuracy)` from the training-mode outputs.
pub fn train_epoch(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64)> {
    let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
    for (bi, batch) in dataset.batches(Split::Train, epoch).enumerate() {
        let batch = batch?;
        let n = batch.labels.len();
        let mut tape = Tape::new();
        let x = tape.input(batch.x);
        let pass = model.forward(&mut tape, x, Mode::Train { dropout_seed: dropout_seed(config.seed, epoch, bi) })?;
        let weights = sample_weights(&batch.labels, config.positive_weight);
        let loss = tape.binary_cross_entropy(pass.output, &batch.labels, weights.as_deref())?;
        model.params.zero_grad();
        backward(&tape, loss, &mut model.params)?;
        adam.apply(&mut model.params);
        model.update_moving_stats(&pass.batch_stats);
        loss_sum += tape.value(loss).data()[0] as f64 * n as f64;
        correct += tape
            .value(pass.output)
            .data()
            .iter()
            .zip(&batch.labels)
            .filter(|(&p, &l)| (p as f64 >= config.threshold) == (l == 1.0))
            .count();
        seen += n;
    }
    if seen == 0 {
        return Err(Error::invalid("training split is empty"));
    }
    Ok((loss_sum / seen as f64, correct as f64 / seen as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub frame_index: usize,
    pub probability: f64,
    pub predicted: u8,
    pub label: Option<u8>,
}

/// Infer-mode probabilities for `keys`, in order.
pub fn predict_keys(model: &Model<f32>, dataset: &Dataset, keys: &[SampleKey]) -> Result<Vec<f64>> {
    let batch = dataset.options.batch_size.max(1);
    let chunks: Vec<_> = keys.chunks(batch).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let samples = chunk.iter().map(|k| dataset.sample(k)).collect::<Result<Vec<_>>>()?;
            let (h, w) = dataset.options.frame_size;
            let mut data = Vec::with_capacity(samples.len() * h * w * 3);
            samples.iter().for_each(|s| data.extend_from_slice(s.x.data()));
            let x = Tensor::new(vec![samples.len(), h, w, 3], data)?;
            Ok(model.predict(&x)?.into_iter().map(f64::from).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Mean clamped binary cross-entropy.
pub fn mean_bce(probabilities: &[f64], labels: &[u8]) -> f64 {
    let clamp = crate::autograd::PROB_CLAMP;
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            if l == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    if probabilities.is_empty() {
        0.0
    } else {
        total / probabilities.len() as f64
    }
}

pub struct Evaluation {
    pub metrics: MetricsReport,
    pub probabilities: Vec<f64>,
    pub labels: Vec<u8>,
    pub records: Vec<PredictionRecord>,
}

pub fn evaluate(model: &Model<f32>, dataset: &Dataset, split: Split, threshold: f64) -> Result<Evaluation> {
    let keys = dataset.split.keys(split);
    if keys.is_empty() {
        return Err(Error::invalid(format!("{split} split is empty")));
    }
    let probabilities = predict_keys(model, dataset, keys)?;
    let labels = keys.iter().map(|k| dataset.label(k)).collect::<Result<Vec<_>>>()?;
    let loss = mean_bce(&probabilities, &labels);
    let metrics = ConfusionCounts::from_predictions(&probabilities, &labels, threshold).metrics_at(threshold, loss);
    let records = keys
        .iter()
        .zip(&probabilities)
        .zip(&labels)
        .map(|((k, &p), &l)| PredictionRecord {
            clip_id: k.clip_id.clone(),
            frame_index: k.frame_index,
            probability: p,
            predicted: (p >= threshold) as u8,
            label: Some(l),
        })
        .collect();
    Ok(Evaluation { metrics, probabilities, labels, records })
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Validation metrics of the restored best weights.
    pub validation: MetricsReport,
}

/// Trains with Adam and early stopping, then restores the weights of the
/// best monitored epoch. `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut Model<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.split.train.is_empty() || dataset.split.val.is_empty() {
        return Err(Error::invalid(format!(
            "training needs nonempty train and validation splits (have {} and {})",
            dataset.split.train.len(),
            dataset.split.val.len()
        )));
    }
    let mut adam = Adam::new(config.adam(), &model.params)?;
    let mut best = model.params.clone();
    let cell = std::cell::RefCell::new(model);
    let state = drive_epochs(
        config,
        |epoch| {
            let mut model = cell.borrow_mut();
            let (train_loss, train_acc) = train_epoch(&mut model, &mut adam, dataset, config, epoch)?;
            let val = evaluate(&model, dataset, Split::Val, config.threshold)?;
            let rec =
                EpochRecord { epoch, train_loss, train_acc, val_loss: val.metrics.loss, val_acc: val.metrics.accuracy };
            info!(
                "epoch {epoch}: train loss {train_loss:.4} acc {train_acc:.3}, val loss {:.4} acc {:.3}",
                rec.val_loss, rec.val_acc
            );
            on_epoch(&rec);
            Ok(rec)
        },
        |_| {
            best = cell.borrow().params.clone();
            Ok(())
        },
    )?;
    let model = cell.into_inner();
    model.params = best;
    let validation = evaluate(model, dataset, Split::Val, config.threshold)?.metrics;
    Ok(TrainOutcome { state, validation })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["clip_id", "frame_index", "probability", "predicted", "label"])?;
    for r in records {
        w.write_record([
            r.clip_id.clone(),
            r.frame_index.to_string(),
            format!("{:.6}", r.probability),
            r.predicted.to_string(),
            r.label.map_or_else(String::new, |l| l.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, val_loss: f64) -> EpochRecord {
        EpochRecord { epoch, train_loss: 1.0, train_acc: 0.5, val_loss, val_acc: 0.5 }
    }

    #[test]
    fn constant_loss_stops_at_21() {
        let state = drive_epochs(&TrainConfig::default(), |e| Ok(rec(e, 0.7)), |_| Ok(())).unwrap();
        assert_eq!(state.epoch, 21);
        assert_eq!(state.stopper.best_epoch, Some(1));
    }

    #[test]
    fn improving_loss_runs_all_epochs() {
        let mut improvements = 0;
        let state = drive_epochs(
            &TrainConfig::default(),
            |e| Ok(rec(e, 1.0 / e as f64)),
            |_| {
                improvements += 1;
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(state.epoch, 100);
        assert_eq!(improvements, 100);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let err = drive_epochs(&TrainConfig::default(), |e| Ok(rec(e, f64::NAN)), |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig { early_stop_patience: 100, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { threshold: 1.0, ..Default::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn bce_reference_values() {
        assert!((mean_bce(&[0.5], &[1]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((mean_bce(&[0.5], &[0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(mean_bce(&[1.0], &[1]) < 1e-6);
    }
}
