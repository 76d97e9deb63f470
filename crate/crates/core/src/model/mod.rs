//! Transformer encoder with a masked-residue head and a GO-term classifier.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    ModelCheckpoint, OptimizerState, RngState, FORMAT_VERSION, MAGIC,
};
pub use config::ModelConfig;
pub use forward::{Dropout, Graph};
pub use params::{FreezeMask, Model, Param, ParamGroup, Phase, INIT_STD};

use protgo_tensor::TensorError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter group '{0}'")]
    UnknownGroup(String),
    #[error("the classifier cannot be frozen during fine-tuning")]
    FrozenClassifier,
    #[error("sequence of {length} tokens exceeds the {max} positions of the model")]
    PositionOutOfRange { length: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },
    #[error("input has no non-padding tokens")]
    EmptyInput,
    #[error("masked-residue forward pass needs at least one MASK token")]
    NoMaskedPosition,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint array '{name}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing array '{0}'")]
    MissingArray(String),
    #[error("checkpoint has unexpected array '{0}'")]
    UnexpectedArray(String),
    #[error("bad checkpoint header: {0}")]
    Header(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[cfg(test)]
mod tests;
