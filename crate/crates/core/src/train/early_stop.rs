use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based early stopping on validation F1 with a snapshot of the
/// best parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub patience: usize,
    pub best_f1: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub best_params: Option<Vec<Tensor>>,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_f1: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            best_params: None,
        }
    }

    /// Records the validation F1 of `epoch`. A strictly better score resets
    /// the counter and snapshots `params`; ties and worse scores count toward
    /// patience. Training stops once `patience` epochs pass without
    /// improvement, i.e. at `best_epoch + patience`.
    pub fn update(&mut self, epoch: usize, val_f1: f64, params: &ParamStore) -> StopDecision {
        if val_f1 > self.best_f1 {
            self.best_f1 = val_f1;
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
            self.best_params = Some(params.snapshot());
        } else {
            self.epochs_since_improvement += 1;
        }
        if self.epochs_since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    /// Restores the best snapshot into `params`, if one was taken.
    pub fn restore_best(&self, params: &mut ParamStore) -> bool {
        match &self.best_params {
            Some(s) => {
                params.restore(s);
                true
            }
            None => false,
        }
    }
}
