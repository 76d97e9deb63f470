use crate::args::{KindArg, SplitArgs};
use crate::dataset::load_dataset;
use crate::manifest::Recorder;
use crate::{Context, UsageError};
use anyhow::Result;
use protgo_core::ingest::GoAspect;
use protgo_core::splitter::{
    audit_leakage, cluster_sequences, clustered_split, random_split, write_split_files,
    DatasetSplit, SplitRatios,
};
use serde::Serialize;
use serde_json::json;
use std::collections::{BTreeMap, HashSet};

#[derive(Debug, Serialize)]
struct PartCounts {
    train: usize,
    dev: usize,
    test: usize,
}

#[derive(Debug, Serialize)]
struct SplitSummary<'a> {
    kind: &'a str,
    seed: u64,
    identity_threshold: Option<f64>,
    kmer: Option<usize>,
    ratios: Option<[f64; 3]>,
    clusters: Option<usize>,
    leakage: Option<usize>,
    total: PartCounts,
    aspects: BTreeMap<GoAspect, PartCounts>,
}

pub fn run(ctx: &Context, args: &SplitArgs, rec: &mut Recorder) -> Result<()> {
    let data = load_dataset(&args.dataset, rec)?;
    let seed = ctx.seed.unwrap_or(0);
    let ratios = match &args.ratios {
        Some(r) => SplitRatios {
            train: r[0],
            dev: r[1],
            test: r[2],
        },
        None => SplitRatios::THIRDS,
    };
    if args.kind == KindArg::Random && args.ratios.is_some() {
        return Err(UsageError("--ratios only applies to --kind clustered".into()).into());
    }
    rec.set_config(json!({
        "dataset": args.dataset,
        "kind": format!("{:?}", args.kind).to_lowercase(),
        "seed": seed,
        "identity_threshold": args.identity_threshold,
        "kmer": args.kmer,
        "ratios": args.ratios,
    }));

    let (split, clusters, leakage) = match args.kind {
        KindArg::Random => {
            let ids: Vec<String> = data.records.iter().map(|r| r.accession.clone()).collect();
            (random_split(&ids, seed)?, None, None)
        }
        KindArg::Clustered => {
            let assignment = cluster_sequences(&data.records, args.identity_threshold, args.kmer)?;
            let split = clustered_split(
                &assignment,
                ratios,
                seed,
                args.identity_threshold,
                args.kmer,
            )?;
            let report = audit_leakage(&split, &assignment)?;
            log::info!(
                "{} clusters, {} spanning splits",
                assignment.num_clusters(),
                report.count()
            );
            (split, Some(assignment.num_clusters()), Some(report.count()))
        }
    };

    for path in write_split_files(&ctx.out, &split)? {
        rec.output(&path);
    }
    let summary = SplitSummary {
        kind: if args.kind == KindArg::Random {
            "random"
        } else {
            "clustered"
        },
        seed,
        identity_threshold: split.identity_threshold,
        kmer: split.kmer,
        ratios: (args.kind == KindArg::Clustered).then_some([
            ratios.train,
            ratios.dev,
            ratios.test,
        ]),
        clusters,
        leakage,
        total: PartCounts {
            train: split.train.len(),
            dev: split.dev.len(),
            test: split.test.len(),
        },
        aspects: aspect_counts(&data.rows, &split),
    };
    rec.set_summary(serde_json::to_value(&summary)?);
    let path = ctx.out.join("split.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
    rec.output(&path);
    log::info!(
        "train {} / dev {} / test {}",
        summary.total.train,
        summary.total.dev,
        summary.total.test
    );
    Ok(())
}

fn aspect_counts(
    rows: &BTreeMap<GoAspect, Vec<crate::dataset::Row>>,
    split: &DatasetSplit,
) -> BTreeMap<GoAspect, PartCounts> {
    let sets: Vec<HashSet<&str>> = split
        .parts()
        .iter()
        .map(|(_, ids)| ids.iter().map(String::as_str).collect())
        .collect();
    rows.iter()
        .map(|(&aspect, rows)| {
            let count = |i: usize| {
                rows.iter()
                    .filter(|r| sets[i].contains(r.accession.as_str()))
                    .count()
            };
            (
                aspect,
                PartCounts {
                    train: count(0),
                    dev: count(1),
                    test: count(2),
                },
            )
        })
        .collect()
}
