//! Masked-residue pretraining and multi-label fine-tuning.

mod config;
mod objective;
mod optim;
mod trainer;

pub use config::{FinetuneConfig, LossKind, LrSchedule, PretrainConfig};
pub use objective::{finetune_loss, mask_tokens, mlm_loss, MaskTarget};
pub use optim::{adam_step, AdamParams};
pub use trainer::{
    evaluate_loss, train_loop, Example, LossRecord, TrainMode, TrainOptions, TrainOutcome,
};

use crate::model::ModelError;
use protgo_tensor::TensorError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training examples")]
    EmptyData,
    #[error("masked-residue loss needs at least one target")]
    NoTargets,
    #[error("target has {target} labels but the model produces {logits}")]
    TargetLength { logits: usize, target: usize },
    #[error("non-finite gradient in parameter group {group} ({param})")]
    NonFiniteGradient { group: String, param: String },
    #[error("non-finite loss at epoch {epoch}, step {step}; the last checkpoint written is the last good state")]
    NonFiniteLoss { epoch: u64, step: u64 },
    #[error("checkpoint was trained with seed {checkpoint} but the config says {config}")]
    SeedMismatch { checkpoint: u64, config: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[cfg(test)]
mod tests;
