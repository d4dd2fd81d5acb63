use serde::Serialize;

/// Confusion matrix of a thresholded binary classifier. `fn_` counts false
/// negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub false_positive_rate: f64,
    pub f1: f64,
    pub loss: f64,
    pub counts: ConfusionCounts,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    /// Positive when `probability >= threshold`.
    pub fn from_predictions(probabilities: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&p, &l) in probabilities.iter().zip(labels) {
            match (p >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn false_positive_rate(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.fp + self.tn)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1_from(precision: f64, recall: f64) -> f64 {
        if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        }
    }

    pub fn f1(&self) -> f64 {
        Self::f1_from(self.precision(), self.recall())
    }

    pub fn metrics(&self, loss: f64) -> MetricsReport {
        self.metrics_at(f64::NAN, loss)
    }

    pub fn metrics_at(&self, threshold: f64, loss: f64) -> MetricsReport {
        MetricsReport {
            threshold,
            accuracy: self.accuracy(),
            precision: self.precision(),
            recall: self.recall(),
            false_positive_rate: self.false_positive_rate(),
            f1: self.f1(),
            loss,
            counts: *self,
        }
    }
}

/// Thresholds `0.05, 0.10, ..., 0.95`.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Metrics at every sweep threshold, loss shared.
pub fn threshold_sweep(probabilities: &[f64], labels: &[u8], loss: f64) -> Vec<MetricsReport> {
    sweep_thresholds()
        .into_iter()
        .map(|t| ConfusionCounts::from_predictions(probabilities, labels, t).metrics_at(t, loss))
        .collect()
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = &self.counts;
        write!(
            f,
            "threshold={:.2} loss={:.4} accuracy={:.4} precision={:.4} recall={:.4} fpr={:.4} f1={:.4} tp={} tn={} fp={} fn={}",
            self.threshold, self.loss, self.accuracy, self.precision, self.recall, self.false_positive_rate, self.f1, c.tp, c.tn, c.fp, c.fn_
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_counts() {
        let m = ConfusionCounts { tp: 50, tn: 40, fp: 5, fn_: 5 }.metrics(0.0);
        assert!((m.accuracy - 0.9).abs() < 1e-12);
        assert!((m.precision - 10.0 / 11.0).abs() < 1e-12);
        assert!((m.recall - 10.0 / 11.0).abs() < 1e-12);
        assert!((m.false_positive_rate - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn published_f1_is_consistent() {
        assert!((ConfusionCounts::f1_from(0.842, 0.927) - 0.883).abs() < 1e-3);
    }

    #[test]
    fn perfect_predictions() {
        let c = ConfusionCounts::from_predictions(&[0.9, 0.1, 0.5, 0.2], &[1, 0, 1, 0], 0.5);
        let m = c.metrics(0.0);
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1, m.false_positive_rate), (1.0, 1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn empty_denominators_are_zero() {
        let m = ConfusionCounts::default().metrics(0.0);
        assert_eq!((m.accuracy, m.precision, m.recall, m.false_positive_rate, m.f1), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn all_positive_predictor() {
        // 115 positives out of 1000
        let labels: Vec<u8> = (0..1000).map(|i| (i < 115) as u8).collect();
        let m = ConfusionCounts::from_predictions(&vec![0.99; 1000], &labels, 0.5).metrics(0.0);
        assert_eq!(m.recall, 1.0);
        assert!((m.precision - 0.115).abs() < 1e-12);
    }
}
