use super::{ModelError, Result};
use crate::ingest::VOCAB_SIZE;
use serde::{Deserialize, Serialize};

/// Encoder hyper-parameters. The defaults are a desk-scale model; the
/// full-size encoder used 30 layers, width 1024 and feed-forward width 4096.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Maximum residue count; sequences carry two extra special tokens.
    pub max_len: usize,
    pub num_labels: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            vocab_size: VOCAB_SIZE,
            max_len: 1000,
            num_labels: 100,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("num_labels", self.num_labels),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Longest token sequence the positional table covers.
    pub fn max_tokens(&self) -> usize {
        self.max_len + 2
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }
}
