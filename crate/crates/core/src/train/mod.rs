//! Contrastive pretraining, fine-tuning, optimization, and evaluation.

pub mod early_stop;
pub mod finetune;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod pretrain;
pub mod schedule;

pub use early_stop::{EarlyStopState, StopDecision};
pub use finetune::{evaluate, finetune_epoch, run_finetune, FinetuneConfig, FinetuneEpoch, FinetuneReport, FinetuneState};
pub use loss::{label_smoothed_ce, nt_xent_loss};
pub use metrics::{classification_metrics, Metrics};
pub use optim::{clip_grad_norm, AdamW, GroupHyper};
pub use pretrain::{pretrain_epoch, run_pretrain, PretrainConfig, PretrainEpoch, PretrainState};
pub use schedule::{schedule_factor, warmup_steps, Schedule};
