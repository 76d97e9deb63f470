use crate::UsageError;
use anyhow::{Context, Result};
use protgo_core::model::ModelConfig;
use protgo_core::train::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Contents of the `--config` file. Every section is optional and unknown
/// fields are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Checks every section; `num_labels` and `max_len` are replaced from
    /// the dataset before use, so only the architecture is checked here.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    /// Applies `--seed` to both training sections.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.pretrain.seed = s;
            self.finetune.seed = s;
        }
        self
    }
}
