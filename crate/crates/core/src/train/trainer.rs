use super::objective::{finetune_loss, mask_tokens, mlm_loss};
use super::optim::{adam_step, AdamParams};
use super::{FinetuneConfig, LrSchedule, PretrainConfig, Result, TrainError};
use crate::ingest::TokenSequence;
use crate::model::{
    save_checkpoint, Dropout, FreezeMask, Graph, Model, ModelCheckpoint, OptimizerState, Phase,
    RngState,
};
use crate::rng::{rng_for, Stream};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// One training sequence. `labels` is empty for pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: TokenSequence,
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainMode {
    Pretrain(PretrainConfig),
    Finetune(FinetuneConfig),
}

impl TrainMode {
    fn validate(&self) -> Result<()> {
        match self {
            TrainMode::Pretrain(c) => c.validate(),
            TrainMode::Finetune(c) => c.validate(),
        }
    }

    fn phase(&self) -> Phase {
        match self {
            TrainMode::Pretrain(_) => Phase::Pretrain,
            TrainMode::Finetune(_) => Phase::Finetune,
        }
    }

    fn seed(&self) -> u64 {
        match self {
            TrainMode::Pretrain(c) => c.seed,
            TrainMode::Finetune(c) => c.seed,
        }
    }

    fn epochs(&self) -> usize {
        match self {
            TrainMode::Pretrain(c) => c.epochs,
            TrainMode::Finetune(c) => c.epochs,
        }
    }

    /// Samples per optimizer step.
    fn step_size(&self) -> usize {
        match self {
            TrainMode::Pretrain(c) => c.batch_size * c.grad_accumulation,
            TrainMode::Finetune(c) => c.batch_size * c.grad_accumulation,
        }
    }

    fn schedule(&self) -> (f64, f64, LrSchedule) {
        match self {
            TrainMode::Pretrain(c) => (c.learning_rate, c.weight_decay, c.lr_schedule),
            TrainMode::Finetune(c) => (c.learning_rate, c.weight_decay, c.lr_schedule),
        }
    }

    fn freeze_mask(&self, model: &Model) -> Result<FreezeMask> {
        let cfg = &model.config;
        Ok(match self {
            TrainMode::Pretrain(c) => match &c.frozen_groups {
                Some(g) => FreezeMask::from_frozen(cfg, g)?,
                None => FreezeMask::none(cfg),
            },
            TrainMode::Finetune(c) => match &c.frozen_groups {
                Some(g) => FreezeMask::from_frozen(cfg, g)?,
                None => FreezeMask::default_for(cfg),
            },
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Value of the `aspect` column in the loss log and records.
    pub aspect: Option<String>,
    /// Rewritten at every epoch end.
    pub checkpoint_path: Option<PathBuf>,
    /// CSV `step,epoch,aspect,loss`, appended when resuming.
    pub loss_log: Option<PathBuf>,
    /// Stop once this many optimizer steps have been taken in total.
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u64,
    pub aspect: Option<String>,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub losses: Vec<LossRecord>,
}

struct LossLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LossLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let fresh = !append || !path.exists();
        let file = if fresh {
            File::create(path).map_err(io)?
        } else {
            OpenOptions::new().append(true).open(path).map_err(io)?
        };
        let mut log = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        if fresh {
            log.write_line("step,epoch,aspect,loss")?;
        }
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        let path = &self.path;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|source| TrainError::Io {
                path: path.clone(),
                source,
            })
    }
}

/// Loss and parameter gradients of one example.
fn sample_gradient(
    model: &Model,
    example: &Example,
    mode: &TrainMode,
    epoch: u64,
    index: u64,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let seed = mode.seed();
    let dropout = Dropout {
        rate: model.config.dropout,
        rng: rng_for(seed, Stream::Dropout, epoch, index),
    };
    let mut g = Graph::train(model, Some(dropout));
    let loss = match mode {
        TrainMode::Pretrain(c) => {
            let mut rng = rng_for(seed, Stream::Masking, epoch, index);
            let (masked, targets) = mask_tokens(&example.tokens, c.mask_probability, &mut rng);
            let logits = g.mlm(&masked.ids)?;
            mlm_loss(&mut g.tape, logits, &targets)?
        }
        TrainMode::Finetune(c) => {
            let logits = g.classify(&example.tokens.ids)?;
            finetune_loss(&mut g.tape, logits, &example.labels, c.loss_kind)?
        }
    };
    let value = g.tape.value(loss).item().expect("losses are scalars");
    g.tape.backward(loss)?;
    let grads = g
        .gradients()
        .into_iter()
        .map(|o| o.map(<[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Mean loss of `data` in inference mode (no dropout). Pretraining masks
/// each example with a fixed evaluation stream.
pub fn evaluate_loss(model: &Model, data: &[Example], mode: &TrainMode) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let losses: Vec<f64> = data
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut g = Graph::eval(model);
            let loss = match mode {
                TrainMode::Pretrain(c) => {
                    let mut rng = rng_for(c.seed, Stream::Masking, u64::MAX, i as u64);
                    let (masked, targets) = mask_tokens(&ex.tokens, c.mask_probability, &mut rng);
                    let logits = g.mlm(&masked.ids)?;
                    mlm_loss(&mut g.tape, logits, &targets)?
                }
                TrainMode::Finetune(c) => {
                    let logits = g.classify(&ex.tokens.ids)?;
                    finetune_loss(&mut g.tape, logits, &ex.labels, c.loss_kind)?
                }
            };
            Ok(g.tape.value(loss).item().expect("scalar"))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Runs (or resumes) a training phase.
///
/// Each epoch visits the data in an order shuffled by `(seed, epoch)`. An
/// optimizer step covers `batch_size × grad_accumulation` examples and its
/// loss is the mean over those examples, so splitting the same examples into
/// more, smaller micro-batches gives the same update. Masking and dropout for
/// an example depend only on `(seed, epoch, example index)`, which makes a
/// run resumed from any checkpoint continue exactly as an uninterrupted one.
pub fn train_loop(
    start: ModelCheckpoint,
    data: &[Example],
    mode: &TrainMode,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    mode.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let ModelCheckpoint {
        format_version,
        mut model,
        optimizer,
        rng_state,
        mut metadata,
    } = start;
    if let TrainMode::Finetune(_) = mode {
        for ex in data {
            if ex.labels.len() != model.config.num_labels {
                return Err(TrainError::TargetLength {
                    logits: model.config.num_labels,
                    target: ex.labels.len(),
                });
            }
        }
    }
    let seed = mode.seed();
    let mask = mode.freeze_mask(&model)?;
    model.apply_freeze(mask, mode.phase())?;

    let mut state = match optimizer {
        Some(s) if rng_state.step > 0 => {
            if rng_state.seed != seed {
                return Err(TrainError::SeedMismatch {
                    checkpoint: rng_state.seed,
                    config: seed,
                });
            }
            s
        }
        _ => OptimizerState::zeros(&model),
    };

    let step_size = mode.step_size();
    let steps_per_epoch = data.len().div_ceil(step_size) as u64;
    let total_steps = steps_per_epoch * mode.epochs() as u64;
    let (base_lr, wd, schedule) = mode.schedule();
    let mut step = state.step;
    let mut log = match &opts.loss_log {
        Some(p) => Some(LossLog::open(p, step > 0)?),
        None => None,
    };
    metadata.insert(
        "phase".into(),
        match mode.phase() {
            Phase::Pretrain => "pretrain".into(),
            Phase::Finetune => "finetune".into(),
        },
    );
    if let Some(a) = &opts.aspect {
        metadata.insert("aspect".into(), a.clone());
    }

    let snapshot = |model: &Model, state: &OptimizerState, step: u64| ModelCheckpoint {
        format_version,
        model: model.clone(),
        optimizer: Some(state.clone()),
        rng_state: RngState {
            seed,
            epoch: step / steps_per_epoch,
            step,
        },
        metadata: metadata.clone(),
    };

    let wave = rayon::current_num_threads().max(1);
    let mut losses = Vec::new();
    let limit = opts.max_steps.unwrap_or(u64::MAX).min(total_steps);
    while step < limit {
        let epoch = step / steps_per_epoch;
        let within = (step % steps_per_epoch) as usize;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(seed, Stream::Shuffle, epoch, 0));
        let chunk = &order[within * step_size..((within + 1) * step_size).min(data.len())];
        let weight = 1.0 / chunk.len() as f64;

        let mut acc: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
        let mut step_loss = 0.0;
        for part in chunk.chunks(wave) {
            let results = part
                .par_iter()
                .map(|&i| sample_gradient(&model, &data[i], mode, epoch, i as u64))
                .collect::<Result<Vec<_>>>()?;
            for (loss, grads) in results {
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        step: step + 1,
                    });
                }
                step_loss += weight * loss;
                for (slot, g) in acc.iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    match slot {
                        Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += weight * g),
                        None => *slot = Some(g.iter().map(|g| weight * g).collect()),
                    }
                }
            }
        }
        let lr = match schedule {
            LrSchedule::Constant => base_lr,
            LrSchedule::Linear => base_lr * (1.0 - step as f64 / total_steps as f64),
        };
        adam_step(&mut model, &acc, &mut state, &AdamParams::new(lr, wd))?;
        step += 1;

        let record = LossRecord {
            step,
            epoch,
            aspect: opts.aspect.clone(),
            loss: step_loss,
        };
        if let Some(log) = &mut log {
            log.write_line(&format!(
                "{},{},{},{}",
                record.step,
                record.epoch,
                record.aspect.as_deref().unwrap_or("-"),
                record.loss
            ))?;
        }
        log::debug!("step {step} epoch {epoch} loss {step_loss:.6}");
        losses.push(record);

        let epoch_done = step % steps_per_epoch == 0;
        if epoch_done || step == limit {
            if let Some(path) = &opts.checkpoint_path {
                save_checkpoint(&snapshot(&model, &state, step), path)?;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: snapshot(&model, &state, step),
        losses,
    })
}
