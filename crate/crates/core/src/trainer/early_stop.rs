/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, epochs_since_improvement: 0 }
    }

    /// Records the monitored loss of `epoch`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        StopDecision { improved, stop: self.epochs_since_improvement >= self.patience }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resets_on_strict_improvement_only() {
        let mut e = EarlyStopping::new(3);
        assert!(e.observe(1, 1.0).improved);
        assert!(!e.observe(2, 1.0).improved);
        assert_eq!(e.epochs_since_improvement, 1);
        assert!(e.observe(3, 0.9).improved);
        assert_eq!(e.epochs_since_improvement, 0);
        e.observe(4, 0.95);
        e.observe(5, 0.95);
        assert!(e.observe(6, 0.95).stop);
        assert_eq!(e.best_epoch, Some(3));
    }
}
