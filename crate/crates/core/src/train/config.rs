use super::{Result, TrainError};
use crate::model::ParamGroup;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero over the whole run.
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Independent sigmoid per label.
    #[default]
    Binary,
    /// Softmax over labels against the normalised target vector; meant for
    /// single-label data.
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mask_probability: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    /// Groups held fixed; nothing by default.
    pub frozen_groups: Option<Vec<ParamGroup>>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_probability: 0.15,
            epochs: 10,
            learning_rate: 0.002,
            weight_decay: 0.01,
            batch_size: 8,
            grad_accumulation: 1,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            frozen_groups: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub grad_accumulation: usize,
    pub batch_size: usize,
    pub threshold: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub loss_kind: LossKind,
    pub lr_schedule: LrSchedule,
    /// Groups held fixed; the default freeze mask when absent.
    pub frozen_groups: Option<Vec<ParamGroup>>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 5e-4,
            grad_accumulation: 32,
            batch_size: 1,
            threshold: 0.5,
            seed: 0,
            weight_decay: 0.0,
            loss_kind: LossKind::Binary,
            lr_schedule: LrSchedule::Constant,
            frozen_groups: None,
        }
    }
}

fn check_common(lr: f64, wd: f64, batch: usize, accum: usize) -> Result<()> {
    let fail = |m: String| Err(TrainError::InvalidConfig(m));
    if !(lr > 0.0 && lr.is_finite()) {
        return fail(format!("learning_rate must be positive, got {lr}"));
    }
    if !(wd >= 0.0 && wd.is_finite()) {
        return fail(format!("weight_decay must be non-negative, got {wd}"));
    }
    if batch == 0 {
        return fail("batch_size must be at least 1".into());
    }
    if accum == 0 {
        return fail("grad_accumulation must be at least 1".into());
    }
    Ok(())
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(
            self.learning_rate,
            self.weight_decay,
            self.batch_size,
            self.grad_accumulation,
        )?;
        if !(self.mask_probability > 0.0 && self.mask_probability < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "mask_probability out of (0,1): {}",
                self.mask_probability
            )));
        }
        Ok(())
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(
            self.learning_rate,
            self.weight_decay,
            self.batch_size,
            self.grad_accumulation,
        )?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(TrainError::InvalidConfig(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}
