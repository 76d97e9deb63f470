use crate::args::{FinetuneArgs, TrainArgs};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, vocab_file, Dataset};
use crate::manifest::Recorder;
use crate::{Context, UsageError};
use anyhow::{bail, Context as _, Result};
use protgo_core::ingest::GoAspect;
use protgo_core::model::{load_checkpoint, Model, ModelCheckpoint, ModelConfig};
use protgo_core::rng::derive_seed;
use protgo_core::splitter::read_ids;
use protgo_core::train::{train_loop, Example, TrainMode, TrainOptions};
use rayon::prelude::*;
use serde_json::json;
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub fn checkpoint_file(dir: &Path, aspect: GoAspect) -> PathBuf {
    dir.join(format!("{}.ckpt", aspect.code()))
}

fn aspect_index(aspect: GoAspect) -> u64 {
    GoAspect::ALL
        .iter()
        .position(|&a| a == aspect)
        .expect("known aspect") as u64
}

fn resume_path(resume: &Path, aspect: GoAspect, single: bool) -> Result<PathBuf> {
    if resume.is_dir() {
        return Ok(checkpoint_file(resume, aspect));
    }
    if !single {
        return Err(UsageError("--resume with a file needs a single --aspect".into()).into());
    }
    Ok(resume.to_path_buf())
}

fn examples(
    data: &Dataset,
    aspect: GoAspect,
    ids: Option<&HashSet<String>>,
    labels: bool,
) -> Vec<Example> {
    data.rows_in(aspect, ids)
        .into_iter()
        .map(|r| Example {
            tokens: r.tokens.clone(),
            labels: if labels {
                r.bits.iter().map(|&b| b as f64).collect()
            } else {
                Vec::new()
            },
        })
        .collect()
}

struct Job {
    aspect: GoAspect,
    start: ModelCheckpoint,
    data: Vec<Example>,
    mode: TrainMode,
    opts: TrainOptions,
}

/// Shared by both training commands; `finetune` decides labels and the
/// starting point of each aspect.
fn run_jobs(args: &TrainArgs, jobs: Vec<Job>, rec: &mut Recorder) -> Result<()> {
    let outputs = Mutex::new(Vec::new());
    let train = |job: Job| -> Result<()> {
        let Job {
            aspect,
            start,
            data,
            mode,
            opts,
        } = job;
        log::info!("{aspect}: training on {} sequences", data.len());
        let out =
            train_loop(start, &data, &mode, &opts).with_context(|| format!("training {aspect}"))?;
        if let Some(last) = out.losses.last() {
            log::info!("{aspect}: step {} loss {:.6}", last.step, last.loss);
        }
        let mut o = outputs.lock().expect("output list");
        o.extend(opts.checkpoint_path.iter().cloned());
        o.extend(opts.loss_log.iter().cloned());
        Ok(())
    };
    if args.parallel_aspects {
        jobs.into_par_iter()
            .map(train)
            .collect::<Result<Vec<()>>>()?;
    } else {
        for job in jobs {
            train(job)?;
        }
    }
    let mut outputs = outputs.into_inner().expect("output list");
    outputs.sort();
    for p in outputs {
        rec.output(&p);
    }
    Ok(())
}

struct Prepared {
    data: Dataset,
    ids: Option<HashSet<String>>,
    config: RunConfig,
    aspects: Vec<GoAspect>,
}

fn prepare(ctx: &Context, args: &TrainArgs, rec: &mut Recorder) -> Result<Prepared> {
    let config = RunConfig::load(ctx.config.as_deref())?.with_seed(ctx.seed);
    if let Some(c) = &ctx.config {
        rec.input(c)?;
    }
    let data = load_dataset(&args.dataset, rec)?;
    let ids = match &args.split {
        Some(dir) => {
            let p = dir.join("train.ids");
            let ids: HashSet<String> = read_ids(&p)?.into_iter().collect();
            rec.input(&p)?;
            Some(ids)
        }
        None => None,
    };
    std::fs::create_dir_all(&ctx.out)
        .with_context(|| format!("cannot create {}", ctx.out.display()))?;
    Ok(Prepared {
        data,
        ids,
        config,
        aspects: args.aspect.aspects(),
    })
}

fn model_config(base: &ModelConfig, data: &Dataset, aspect: GoAspect) -> Result<ModelConfig> {
    Ok(ModelConfig {
        num_labels: data.vocabulary(aspect)?.len(),
        max_len: data.info.max_len,
        ..base.clone()
    })
}

fn options(ctx: &Context, args: &TrainArgs, aspect: GoAspect) -> TrainOptions {
    TrainOptions {
        aspect: Some(aspect.code().to_owned()),
        checkpoint_path: Some(checkpoint_file(&ctx.out, aspect)),
        loss_log: Some(ctx.out.join(format!("loss_{}.csv", aspect.code()))),
        max_steps: args.max_steps,
    }
}

pub fn pretrain(ctx: &Context, args: &TrainArgs, rec: &mut Recorder) -> Result<()> {
    let p = prepare(ctx, args, rec)?;
    rec.set_config(json!({
        "dataset": args.dataset,
        "split": args.split,
        "aspects": p.aspects,
        "resume": args.resume,
        "max_steps": args.max_steps,
        "model": p.config.model,
        "pretrain": p.config.pretrain,
    }));
    let mut jobs = Vec::new();
    for &aspect in &p.aspects {
        let seed = derive_seed(p.config.pretrain.seed, aspect_index(aspect));
        let mode = TrainMode::Pretrain(protgo_core::train::PretrainConfig {
            seed,
            ..p.config.pretrain.clone()
        });
        let start = match &args.resume {
            Some(r) => {
                let path = resume_path(r, aspect, p.aspects.len() == 1)?;
                rec.input(&path)?;
                load_checkpoint(&path)?
            }
            None => ModelCheckpoint::new(Model::init(
                model_config(&p.config.model, &p.data, aspect)?,
                seed,
            )?),
        };
        jobs.push(Job {
            aspect,
            start,
            data: examples(&p.data, aspect, p.ids.as_ref(), false),
            mode,
            opts: options(ctx, args, aspect),
        });
    }
    run_jobs(args, jobs, rec)
}

pub fn finetune(ctx: &Context, args: &FinetuneArgs, rec: &mut Recorder) -> Result<()> {
    let t = &args.train;
    let p = prepare(ctx, t, rec)?;
    if t.resume.is_some() && args.pretrained.is_some() {
        return Err(UsageError("--resume and --pretrained are mutually exclusive".into()).into());
    }
    rec.set_config(json!({
        "dataset": t.dataset,
        "split": t.split,
        "aspects": p.aspects,
        "resume": t.resume,
        "pretrained": args.pretrained,
        "max_steps": t.max_steps,
        "model": p.config.model,
        "finetune": p.config.finetune,
    }));
    let mut jobs = Vec::new();
    for &aspect in &p.aspects {
        let seed = derive_seed(p.config.finetune.seed, aspect_index(aspect));
        let mode = TrainMode::Finetune(protgo_core::train::FinetuneConfig {
            seed,
            ..p.config.finetune.clone()
        });
        let num_labels = p.data.vocabulary(aspect)?.len();
        let start = if let Some(r) = &t.resume {
            let path = resume_path(r, aspect, p.aspects.len() == 1)?;
            rec.input(&path)?;
            load_checkpoint(&path)?
        } else if let Some(dir) = &args.pretrained {
            let path = checkpoint_file(dir, aspect);
            if !path.exists() {
                bail!("no pretrained {aspect} checkpoint at {}", path.display());
            }
            rec.input(&path)?;
            let mut model = load_checkpoint(&path)?.model;
            if model.config.max_len != p.data.info.max_len {
                bail!(
                    "pretrained {aspect} model has max_len {} but the dataset uses {}",
                    model.config.max_len,
                    p.data.info.max_len
                );
            }
            if model.config.num_labels != num_labels {
                model.reset_classifier(num_labels, seed)?;
            }
            ModelCheckpoint::new(model)
        } else {
            ModelCheckpoint::new(Model::init(
                model_config(&p.config.model, &p.data, aspect)?,
                seed,
            )?)
        };
        // predict and evaluate find the vocabulary next to the checkpoint
        let vsrc = vocab_file(&t.dataset, aspect);
        let vdst = vocab_file(&ctx.out, aspect);
        std::fs::copy(&vsrc, &vdst).with_context(|| format!("cannot copy {}", vsrc.display()))?;
        rec.output(&vdst);
        jobs.push(Job {
            aspect,
            start,
            data: examples(&p.data, aspect, p.ids.as_ref(), true),
            mode,
            opts: options(ctx, t, aspect),
        });
    }
    run_jobs(t, jobs, rec)
}
