use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{validation, Error, Result};
use crate::graph::{degree_weighted_sample, MaskKind, NodeMask, Split, SplitAssignment};
use crate::model::{ForwardOptions, GraphContext, Gmlm};
use crate::tape::Tape;

use super::early_stop::{EarlyStopState, StopDecision};
use super::loss::label_smoothed_ce;
use super::metrics::{classification_metrics, Metrics};
use super::optim::{clip_grad_norm, AdamW, GroupHyper};
use super::schedule::Schedule;

/// End-to-end fine-tuning of the whole model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FinetuneConfig {
    pub max_epochs: usize,
    pub patience: usize,
    /// Each epoch draws the active proportion uniformly from this range.
    pub active_range: (f64, f64),
    pub beta: f64,
    pub label_smoothing: f64,
    pub lr_graph: f64,
    pub lr_text: f64,
    pub lr_other: f64,
    pub weight_decay_graph: f64,
    pub weight_decay_text: f64,
    pub weight_decay_other: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            patience: 30,
            active_range: (0.3, 0.8),
            beta: 0.7,
            label_smoothing: 0.2,
            lr_graph: 1e-4,
            lr_text: 1e-5,
            lr_other: 1e-4,
            weight_decay_graph: 0.05,
            weight_decay_text: 0.01,
            weight_decay_other: 0.05,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.active_range;
        if self.patience >= self.max_epochs {
            return Err(validation(alloc::format!(
                "patience {} must be below max_epochs {}",
                self.patience,
                self.max_epochs
            )));
        }
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(validation(alloc::format!(
                "active range ({lo}, {hi}) must satisfy 0 < low <= high <= 1"
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(validation("label_smoothing must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.beta) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(validation("beta and warmup_fraction must lie in [0, 1]"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(validation("clip_norm must be positive"));
        }
        let rates = [
            self.lr_graph,
            self.lr_text,
            self.lr_other,
            self.weight_decay_graph,
            self.weight_decay_text,
            self.weight_decay_other,
        ];
        if rates.iter().any(|r| r.is_nan() || *r < 0.0) {
            return Err(validation("learning rates and weight decays must be non-negative"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new([
            GroupHyper {
                lr: self.lr_graph,
                weight_decay: self.weight_decay_graph,
            },
            GroupHyper {
                lr: self.lr_text,
                weight_decay: self.weight_decay_text,
            },
            GroupHyper {
                lr: self.lr_other,
                weight_decay: self.weight_decay_other,
            },
        ])
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::WarmupLinear {
            total_steps: self.max_epochs as u64,
            warmup_fraction: self.warmup_fraction,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub rng: ChaCha8Rng,
    pub optimizer: AdamW,
    pub step: u64,
}

impl FinetuneState {
    pub fn new(cfg: &FinetuneConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            optimizer: cfg.optimizer(),
            step: 0,
        }
    }
}

/// Outcome of one fine-tuning epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneEpoch {
    pub loss: f64,
    pub active_nodes: usize,
    pub grad_norm: f64,
    pub lr_factor: f64,
    pub val: Metrics,
}

/// Accuracy and macro F1 of an evaluation pass over `nodes`.
pub fn evaluate(model: &Gmlm, ctx: &GraphContext, nodes: &[usize]) -> Result<Metrics> {
    let inference = model.infer(ctx)?;
    classification_metrics(&inference.predictions(), &ctx.labels, nodes, ctx.num_classes)
}

/// One optimizer step of fine-tuning followed by validation.
///
/// A degree-weighted sample of training nodes is both soft-masked in the
/// graph branch and the only set whose texts are encoded; the loss covers
/// exactly those nodes.
pub fn finetune_epoch(
    model: &mut Gmlm,
    ctx: &GraphContext,
    splits: &SplitAssignment,
    cfg: &FinetuneConfig,
    state: &mut FinetuneState,
) -> Result<FinetuneEpoch> {
    model.check_context(ctx)?;
    let n = ctx.num_nodes();
    if splits.tags.len() != n {
        return Err(validation(alloc::format!("split covers {} nodes, graph has {n}", splits.tags.len())));
    }
    let train = splits.mask(Split::Train, MaskKind::Active);
    if train.count() == 0 {
        return Err(Error::EmptyActiveSet);
    }
    let (lo, hi) = cfg.active_range;
    let p = if lo == hi { lo } else { state.rng.random_range(lo..=hi) };
    let active: NodeMask = degree_weighted_sample(&ctx.degrees, &train, p, MaskKind::Active, &mut state.rng)?;
    let active_idx = active.indices();
    if active_idx.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let labels: Vec<usize> = active_idx.iter().map(|&i| ctx.labels[i]).collect();

    let (loss, mut grads) = {
        let mut tape = Tape::with_params(&model.params);
        let out = model.forward(
            &mut tape,
            ctx,
            ForwardOptions {
                perturb: Some(&active),
                beta: cfg.beta,
                active: &active,
            },
            Some(&mut state.rng),
        )?;
        let probs = tape.select_rows(out.head.probs, &active_idx)?;
        let loss = label_smoothed_ce(&mut tape, probs, &labels, cfg.label_smoothing)?;
        tape.backward(loss)?;
        (tape.value(loss).item(), tape.param_grads())
    };
    let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    let lr_factor = cfg.schedule().factor(state.step);
    state.optimizer.step(&mut model.params, &grads, lr_factor);
    state.step += 1;

    let val = evaluate(model, ctx, &splits.nodes(Split::Val))?;
    Ok(FinetuneEpoch {
        loss,
        active_nodes: active_idx.len(),
        grad_norm,
        lr_factor,
        val,
    })
}

/// Summary of a fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub epochs_run: usize,
    pub history: Vec<FinetuneEpoch>,
}

/// Fine-tunes until early stopping or `max_epochs`, then restores the
/// parameters of the best validation epoch. Epochs are numbered from 1.
pub fn run_finetune(
    model: &mut Gmlm,
    ctx: &GraphContext,
    splits: &SplitAssignment,
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(usize, &FinetuneEpoch),
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if splits.count(Split::Val) == 0 {
        return Err(validation("validation split is empty"));
    }
    let mut state = FinetuneState::new(cfg);
    let mut stopper = EarlyStopState::new(cfg.patience);
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let record = finetune_epoch(model, ctx, splits, cfg, &mut state)?;
        on_epoch(epoch, &record);
        history.push(record);
        if stopper.update(epoch, record.val.macro_f1, &model.params) == StopDecision::Stop {
            break;
        }
    }
    stopper.restore_best(&mut model.params);
    Ok(FinetuneReport {
        best_epoch: stopper.best_epoch,
        best_val_f1: stopper.best_f1,
        epochs_run: history.len(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{tiny_config, tiny_graph, tiny_setup};
    use crate::graph::make_splits;

    fn cfg() -> FinetuneConfig {
        FinetuneConfig {
            max_epochs: 6,
            patience: 3,
            lr_graph: 1e-3,
            lr_text: 1e-4,
            lr_other: 1e-3,
            seed: 5,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn trajectory_is_deterministic_and_clipped() {
        let run = || {
            let (mut m, ctx) = tiny_setup(20, tiny_config(), 3);
            let splits = make_splits(&tiny_graph(20, 3), [0.6, 0.2, 0.2], 1).unwrap();
            let mut norms = Vec::new();
            let report = run_finetune(&mut m, &ctx, &splits, &cfg(), |_, e| norms.push(e.grad_norm)).unwrap();
            (report, m.params.snapshot())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.epochs_run <= 6 && a.best_epoch >= 1);
        assert_eq!(a.history[0].lr_factor, 0.0);
        for e in &a.history {
            assert!(e.active_nodes >= 1 && e.loss.is_finite());
        }
    }

    #[test]
    fn best_snapshot_is_restored() {
        let (mut m, ctx) = tiny_setup(20, tiny_config(), 4);
        let splits = make_splits(&tiny_graph(20, 4), [0.6, 0.2, 0.2], 2).unwrap();
        let report = run_finetune(&mut m, &ctx, &splits, &cfg(), |_, _| {}).unwrap();
        let val = evaluate(&m, &ctx, &splits.nodes(Split::Val)).unwrap();
        assert_eq!(val.macro_f1, report.best_val_f1);
        assert_eq!(val.macro_f1, report.history[report.best_epoch - 1].val.macro_f1);
    }

    #[test]
    fn epoch_without_training_nodes_fails() {
        let (mut m, ctx) = tiny_setup(12, tiny_config(), 5);
        let splits = SplitAssignment {
            seed: 0,
            tags: alloc::vec![Split::Val; 12],
        };
        let mut state = FinetuneState::new(&cfg());
        assert_eq!(
            finetune_epoch(&mut m, &ctx, &splits, &cfg(), &mut state).unwrap_err(),
            Error::EmptyActiveSet
        );
    }

    #[test]
    fn config_validation() {
        assert!(FinetuneConfig::default().validate().is_ok());
        let bad = [
            FinetuneConfig { patience: 500, ..FinetuneConfig::default() },
            FinetuneConfig { label_smoothing: 1.0, ..FinetuneConfig::default() },
            FinetuneConfig { active_range: (0.0, 0.5), ..FinetuneConfig::default() },
            FinetuneConfig { clip_norm: 0.0, ..FinetuneConfig::default() },
            FinetuneConfig { lr_text: -1.0, ..FinetuneConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Validation(_))));
        }
    }
}
