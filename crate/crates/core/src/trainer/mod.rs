//! Optimization, configuration, checkpoints and the training entry points.

pub mod checkpoint;
pub mod config;
pub mod finetune;
pub mod optim;
pub mod pretrain;

pub use checkpoint::{peek_dtype, Checkpoint, RngState};
pub use config::{FinetuneConfig, Precision, Preset, ProbeConfig, RunConfig, SplitSelect, TrainConfig};
pub use finetune::{export_embeddings, finetune, linear_probe, param_diff, ClassifierReport};
pub use optim::{adamw_step, cosine_lr, AdamHyper, AdamState};
pub use pretrain::{evaluate, pretrain, read_metrics, EvalLoss, MetricsRow, PretrainOutcome};
