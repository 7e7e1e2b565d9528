use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{validation, Result};
use crate::graph::{degree_weighted_sample, MaskKind, NodeMask};
use crate::model::{GraphContext, Gmlm};
use crate::tape::Tape;

use super::loss::nt_xent_loss;
use super::optim::AdamW;
use super::schedule::Schedule;

/// Contrastive pretraining of the graph branch and the mask token.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PretrainConfig {
    pub epochs: usize,
    pub beta: f64,
    pub tau: f64,
    /// Each epoch draws the masked proportion uniformly from this range.
    pub mask_range: (f64, f64),
    pub lr: f64,
    pub weight_decay: f64,
    pub t0: u64,
    pub t_mult: u64,
    /// Upper bound on the number of nodes in the contrastive batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            beta: 0.7,
            tau: 0.1,
            mask_range: (0.2, 0.4),
            lr: 1e-4,
            weight_decay: 0.05,
            t0: 10,
            t_mult: 2,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mask_range;
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(validation("pretraining tau must be positive"));
        }
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(validation(alloc::format!(
                "mask range ({lo}, {hi}) must satisfy 0 < low <= high <= 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(validation("beta must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.t0 == 0 || self.t_mult == 0 {
            return Err(validation("batch_size, t0 and t_mult must be positive"));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(validation("learning rate and weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::CosineWarmRestarts {
            t0: self.t0,
            t_mult: self.t_mult,
        }
    }
}

/// Random stream and optimizer carried across pretraining epochs.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub rng: ChaCha8Rng,
    pub optimizer: AdamW,
    pub step: u64,
}

impl PretrainState {
    pub fn new(cfg: &PretrainConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            optimizer: AdamW::uniform(cfg.lr, cfg.weight_decay),
            step: 0,
        }
    }
}

/// Outcome of one pretraining epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainEpoch {
    pub loss: f64,
    pub mask_proportion: f64,
    pub lr_factor: f64,
}

/// One optimizer step of contrastive pretraining.
///
/// Two degree-weighted masks of the same proportion perturb the features,
/// the shared graph branch embeds both views, and NT-Xent over a uniform
/// node batch is minimized. Only graph-branch parameters and the mask token
/// are updated.
pub fn pretrain_epoch(
    model: &mut Gmlm,
    ctx: &GraphContext,
    cfg: &PretrainConfig,
    state: &mut PretrainState,
) -> Result<PretrainEpoch> {
    model.check_context(ctx)?;
    let n = ctx.num_nodes();
    let (lo, hi) = cfg.mask_range;
    let p = if lo == hi { lo } else { state.rng.random_range(lo..=hi) };
    let eligible = NodeMask::all(n, MaskKind::Perturbation);
    let mask1 = degree_weighted_sample(&ctx.degrees, &eligible, p, MaskKind::Perturbation, &mut state.rng)?;
    let mask2 = degree_weighted_sample(&ctx.degrees, &eligible, p, MaskKind::Perturbation, &mut state.rng)?;
    let b = cfg.batch_size.min(n);
    let mut batch: Vec<usize> = index::sample(&mut state.rng, n, b).into_vec();
    batch.sort_unstable();

    let (loss, mut grads) = {
        let mut tape = Tape::with_params(&model.params);
        let v1 = model.forward_graph(&mut tape, ctx, Some(&mask1), cfg.beta, Some(&mut state.rng))?;
        let v2 = model.forward_graph(&mut tape, ctx, Some(&mask2), cfg.beta, Some(&mut state.rng))?;
        let z1 = tape.select_rows(v1.embedding, &batch)?;
        let z2 = tape.select_rows(v2.embedding, &batch)?;
        let loss = nt_xent_loss(&mut tape, z1, z2, cfg.tau)?;
        tape.backward(loss)?;
        (tape.value(loss).item(), tape.param_grads())
    };
    grads.retain(|id| model.is_pretrain_param(id));
    let lr_factor = cfg.schedule().factor(state.step);
    state.optimizer.step(&mut model.params, &grads, lr_factor);
    state.step += 1;
    Ok(PretrainEpoch {
        loss,
        mask_proportion: p,
        lr_factor,
    })
}

/// Runs `cfg.epochs` pretraining epochs, reporting each through `on_epoch`
/// (1-based epoch numbers).
pub fn run_pretrain(
    model: &mut Gmlm,
    ctx: &GraphContext,
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, &PretrainEpoch),
) -> Result<Vec<PretrainEpoch>> {
    cfg.validate()?;
    let mut state = PretrainState::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let record = pretrain_epoch(model, ctx, cfg, &mut state)?;
        on_epoch(epoch, &record);
        history.push(record);
    }
    Ok(history)
}
