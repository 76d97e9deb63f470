use crate::args::PredictArgs;
use crate::commands::train::checkpoint_file;
use crate::dataset::{read_vocab, vocab_file};
use crate::manifest::Recorder;
use crate::{Context, UsageError};
use anyhow::{bail, Context as _, Result};
use protgo_core::fusion::FusionModel;
use protgo_core::ingest::GoAspect;
use protgo_core::model::load_checkpoint;
use serde_json::json;
use std::path::Path;

/// Loads `<ASPECT>.ckpt` and `vocab_<ASPECT>.tsv` for every aspect.
pub fn load_fusion(dir: &Path, rec: &mut Recorder) -> Result<FusionModel> {
    let mut parts = Vec::new();
    for aspect in GoAspect::ALL {
        let ckpt = checkpoint_file(dir, aspect);
        let vocab = vocab_file(dir, aspect);
        if !ckpt.exists() {
            bail!("missing {aspect} model: {} not found", ckpt.display());
        }
        if !vocab.exists() {
            bail!("missing {aspect} vocabulary: {} not found", vocab.display());
        }
        rec.input(&ckpt)?;
        rec.input(&vocab)?;
        let model = load_checkpoint(&ckpt)
            .with_context(|| format!("loading {}", ckpt.display()))?
            .model;
        parts.push((model, read_vocab(&vocab, aspect)?));
    }
    Ok(FusionModel::new(parts)?)
}

pub fn run(ctx: &Context, args: &PredictArgs, rec: &mut Recorder) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(UsageError(format!(
            "--threshold must be in [0, 1], got {}",
            args.threshold
        ))
        .into());
    }
    rec.set_config(json!({
        "input": args.input,
        "models": args.models,
        "threshold": args.threshold,
    }));
    let mut fusion = load_fusion(&args.models, rec)?;
    fusion.set_threshold(args.threshold)?;
    rec.input(&args.input)?;
    std::fs::create_dir_all(&ctx.out)
        .with_context(|| format!("cannot create {}", ctx.out.display()))?;
    let output = ctx.out.join("predictions.tsv");
    let summary = fusion.predict_batch(&args.input, &output)?;
    rec.output(&output);
    log::info!(
        "{} records annotated, {} skipped",
        summary.processed,
        summary.diagnostics.len()
    );
    Ok(())
}
