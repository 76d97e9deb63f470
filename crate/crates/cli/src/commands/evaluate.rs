use crate::args::{EvaluateArgs, PartArg};
use crate::commands::predict::load_fusion;
use crate::dataset::{load_dataset, Dataset, Row};
use crate::manifest::Recorder;
use crate::{Context, UsageError};
use anyhow::{bail, Context as _, Result};
use protgo_core::fusion::FusionModel;
use protgo_core::ingest::{tokenize, GoAspect, GoTerm};
use protgo_core::metrics::{evaluate_aspect, write_report, EvaluationReport};
use protgo_core::splitter::read_ids;
use rayon::prelude::*;
use serde_json::json;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

type Scores = BTreeMap<GoAspect, Vec<Vec<f64>>>;

fn model_scores(
    fusion: &FusionModel,
    data: &Dataset,
    rows: &BTreeMap<GoAspect, Vec<&Row>>,
) -> Result<Scores> {
    let sequences: HashMap<&str, &str> = data
        .records
        .iter()
        .map(|r| (r.accession.as_str(), r.sequence.as_str()))
        .collect();
    let max_len = fusion.max_len();
    let mut out = BTreeMap::new();
    for (&aspect, rows) in rows {
        let scores = rows
            .par_iter()
            .map(|r| {
                let seq = sequences
                    .get(r.accession.as_str())
                    .with_context(|| format!("{} missing from records.tsv", r.accession))?;
                let tokens = tokenize(seq, max_len)?;
                Ok(fusion.aspect_scores(aspect, &tokens)?)
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(aspect, scores);
    }
    Ok(out)
}

/// Reads a prediction TSV; terms that were not predicted score 0.
fn file_scores(
    path: &Path,
    data: &Dataset,
    rows: &BTreeMap<GoAspect, Vec<&Row>>,
) -> Result<Scores> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut found: HashMap<(String, GoAspect, GoTerm), f64> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || format!("{}:{}: malformed prediction line", path.display(), i + 1);
        if cols.len() != 4 {
            bail!(bad());
        }
        if cols[1] == "-" {
            continue;
        }
        let term = GoTerm::parse(cols[1]).with_context(bad)?;
        let aspect: GoAspect = cols[2].parse().map_err(|_| anyhow::anyhow!(bad()))?;
        let score: f64 = cols[3].parse().with_context(bad)?;
        found.insert((cols[0].to_owned(), aspect, term), score);
    }
    let mut out = BTreeMap::new();
    for (&aspect, rows) in rows {
        let vocab = data.vocabulary(aspect)?;
        let scores = rows
            .iter()
            .map(|r| {
                vocab
                    .terms
                    .iter()
                    .map(|t| {
                        found
                            .get(&(r.accession.clone(), aspect, t.clone()))
                            .copied()
                            .unwrap_or(0.0)
                    })
                    .collect()
            })
            .collect();
        out.insert(aspect, scores);
    }
    Ok(out)
}

pub fn run(ctx: &Context, args: &EvaluateArgs, rec: &mut Recorder) -> Result<()> {
    if let Some(t) = args.threshold.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(UsageError(format!("--threshold must be in [0, 1], got {t}")).into());
    }
    if args.bucket_width == 0 {
        return Err(UsageError("--bucket-width must be positive".into()).into());
    }
    let part = match args.part {
        PartArg::Train => "train",
        PartArg::Dev => "dev",
        PartArg::Test => "test",
    };
    rec.set_config(json!({
        "dataset": args.dataset,
        "split": args.split,
        "part": part,
        "models": args.models,
        "predictions": args.predictions,
        "thresholds": args.threshold,
        "bucket_width": args.bucket_width,
    }));
    let data = load_dataset(&args.dataset, rec)?;
    let ids_path = args.split.join(format!("{part}.ids"));
    let ids: HashSet<String> = read_ids(&ids_path)?.into_iter().collect();
    rec.input(&ids_path)?;

    let mut rows = BTreeMap::new();
    for aspect in GoAspect::ALL {
        let r = data.rows_in(aspect, Some(&ids));
        if r.is_empty() {
            log::warn!("{aspect}: no {part} records, skipped");
        } else {
            rows.insert(aspect, r);
        }
    }
    if rows.is_empty() {
        bail!("empty {part} split: no records to evaluate");
    }

    let scores = match (&args.models, &args.predictions) {
        (Some(dir), _) => {
            let fusion = load_fusion(dir, rec)?;
            for &aspect in rows.keys() {
                let vocab = data.vocabulary(aspect)?;
                if fusion.aspect(aspect)?.vocabulary != *vocab {
                    bail!("{aspect} model vocabulary differs from the dataset's");
                }
            }
            model_scores(&fusion, &data, &rows)?
        }
        (None, Some(p)) => {
            rec.input(p)?;
            file_scores(p, &data, &rows)?
        }
        (None, None) => unreachable!("clap requires --models or --predictions"),
    };

    let multi = args.threshold.len() > 1;
    for &t in &args.threshold {
        let mut details = Vec::new();
        for (&aspect, rows) in &rows {
            let targets: Vec<Vec<u8>> = rows.iter().map(|r| r.bits.clone()).collect();
            let lengths: Vec<usize> = rows.iter().map(|r| r.tokens.original_length).collect();
            details.push(evaluate_aspect(
                aspect,
                &lengths,
                &scores[&aspect],
                &targets,
                t,
                args.bucket_width,
            )?);
        }
        let report = EvaluationReport {
            threshold: t,
            bucket_width: args.bucket_width,
            aspects: details.iter().map(|d| d.metrics.clone()).collect(),
        };
        let dir = if multi {
            ctx.out.join(format!("threshold_{t:.3}"))
        } else {
            ctx.out.clone()
        };
        for p in write_report(&dir, &report, &details)? {
            rec.output(&p);
        }
        if !ctx.quiet {
            if multi {
                println!("threshold {t}");
            }
            print!("{}", report.table());
        }
    }
    Ok(())
}
