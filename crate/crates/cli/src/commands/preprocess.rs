use crate::args::PreprocessArgs;
use crate::dataset::write_dataset;
use crate::manifest::Recorder;
use crate::Context;
use anyhow::{bail, Result};
use protgo_core::ingest::{
    build_vocabulary, filter_unannotated, parse_records, GoAspect, InputFormat,
};
use serde_json::json;
use std::collections::BTreeMap;

pub fn run(ctx: &Context, args: &PreprocessArgs, rec: &mut Recorder) -> Result<()> {
    if args.top_k == 0 || args.max_len == 0 {
        return Err(crate::UsageError("--top-k and --max-len must be positive".into()).into());
    }
    let format = match &args.annotations {
        Some(a) => {
            rec.input(a)?;
            InputFormat::FastaTsv {
                annotations: a.clone(),
            }
        }
        None => InputFormat::Tsv,
    };
    rec.input(&args.input)?;
    rec.set_config(json!({
        "input": args.input,
        "annotations": args.annotations,
        "top_k": args.top_k,
        "max_len": args.max_len,
    }));

    let parsed = parse_records(&args.input, &format)?;
    let total = parsed.len();
    let records = filter_unannotated(parsed);
    if records.is_empty() {
        bail!("no annotated records in {}", args.input.display());
    }
    log::info!("{} of {} records annotated", records.len(), total);

    let mut vocabularies = BTreeMap::new();
    for aspect in GoAspect::ALL {
        vocabularies.insert(aspect, build_vocabulary(&records, aspect, args.top_k)?);
    }
    let info = write_dataset(
        &ctx.out,
        &records,
        &vocabularies,
        args.top_k,
        args.max_len,
        rec,
    )?;
    for (aspect, s) in &info.aspects {
        log::info!("{aspect}: {} records, {} terms", s.records, s.terms);
    }
    Ok(())
}
