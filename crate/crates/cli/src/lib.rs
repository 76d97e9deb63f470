//! The `protgo` command line: preprocess, split, pretrain, finetune,
//! predict and evaluate, each writing a run manifest next to its outputs.

pub mod args;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod manifest;

use anyhow::Result;
use args::{Cli, Command};
use manifest::Recorder;
use std::path::PathBuf;

/// Bad arguments or config; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Global options shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Context {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub quiet: bool,
}

pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// 2 for usage and I/O failures, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let usage_or_io = err
        .chain()
        .any(|e| e.is::<UsageError>() || e.is::<std::io::Error>());
    if usage_or_io {
        EXIT_USAGE
    } else {
        EXIT_DOMAIN
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(m) = &cli.verify {
        let n = manifest::verify(m)?;
        log::info!("{n} inputs match {}", m.display());
        if cli.command.is_none() {
            return Ok(());
        }
    }
    let Some(command) = cli.command else {
        return Err(UsageError("no subcommand given".into()).into());
    };
    let ctx = Context {
        seed: cli.seed,
        config: cli.config,
        out: cli.out,
        quiet: cli.quiet,
    };
    let mut rec = Recorder::new(command.name(), ctx.seed);
    match &command {
        Command::Preprocess(a) => commands::preprocess::run(&ctx, a, &mut rec)?,
        Command::Split(a) => commands::split::run(&ctx, a, &mut rec)?,
        Command::Pretrain(a) => commands::train::pretrain(&ctx, a, &mut rec)?,
        Command::Finetune(a) => commands::train::finetune(&ctx, a, &mut rec)?,
        Command::Predict(a) => commands::predict::run(&ctx, a, &mut rec)?,
        Command::Evaluate(a) => commands::evaluate::run(&ctx, a, &mut rec)?,
    }
    let path = rec.finish(&ctx.out)?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}
