//! Multi-label evaluation: confusion counts, micro precision/recall/F1,
//! subset accuracy, micro-averaged ROC and accuracy by sequence length.
//!
//! Scores and targets are row-per-sample matrices over one aspect's label
//! vocabulary. A cell is predicted positive when its score is at least the
//! threshold.

use crate::ingest::GoAspect;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_BUCKET_WIDTH: usize = 100;
pub const DEFAULT_BUCKET_LIMIT: usize = 2000;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("ROC undefined: targets contain {positives} positive and {negatives} negative cells")]
    RocUndefined { positives: u64, negatives: u64 },
    #[error("threshold must be in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("bucket width must be positive")]
    InvalidBucketWidth,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_shapes(scores: &[Vec<f64>], targets: &[Vec<u8>]) -> Result<()> {
    if scores.len() != targets.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} score rows vs {} target rows",
            scores.len(),
            targets.len()
        )));
    }
    for (i, (s, t)) in scores.iter().zip(targets).enumerate() {
        if s.len() != t.len() {
            return Err(MetricsError::ShapeMismatch(format!(
                "row {i}: {} scores vs {} targets",
                s.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(
    scores: &[Vec<f64>],
    targets: &[Vec<u8>],
    threshold: f64,
) -> Result<ConfusionCounts> {
    check_shapes(scores, targets)?;
    let mut c = ConfusionCounts::default();
    for (s_row, t_row) in scores.iter().zip(targets) {
        for (&s, &t) in s_row.iter().zip(t_row) {
            match (s >= threshold, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Micro precision, recall and their harmonic mean; 0/0 gives 0.
pub fn prf1(c: &ConfusionCounts) -> Prf1 {
    let tp = c.tp as f64;
    let precision = ratio(tp, tp + c.fp as f64);
    let recall = ratio(tp, tp + c.fn_ as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Prf1 {
        precision,
        recall,
        f1,
    }
}

/// Fraction of samples whose whole thresholded label vector is correct.
pub fn subset_accuracy(scores: &[Vec<f64>], targets: &[Vec<u8>], threshold: f64) -> Result<f64> {
    check_shapes(scores, targets)?;
    let exact = scores
        .iter()
        .zip(targets)
        .filter(|(s, t)| row_correct(s, t, threshold))
        .count();
    Ok(ratio(exact as f64, scores.len() as f64))
}

fn row_correct(scores: &[f64], targets: &[u8], threshold: f64) -> bool {
    scores
        .iter()
        .zip(targets)
        .all(|(&s, &t)| (s >= threshold) == (t != 0))
}

/// Fraction of correct (sample, label) cells.
pub fn micro_accuracy(c: &ConfusionCounts) -> f64 {
    ratio((c.tp + c.tn) as f64, c.total() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Cells scoring at least this are called positive. The first point,
    /// before any cell is accepted, carries +∞.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Micro-averaged ROC: all cells pooled, one curve point per distinct score
/// (descending), area by the trapezoid rule.
pub fn micro_roc(scores: &[Vec<f64>], targets: &[Vec<u8>]) -> Result<RocCurve> {
    check_shapes(scores, targets)?;
    let mut cells: Vec<(f64, bool)> = scores
        .iter()
        .zip(targets)
        .flat_map(|(s, t)| s.iter().zip(t).map(|(&s, &t)| (s, t != 0)))
        .collect();
    let positives = cells.iter().filter(|c| c.1).count() as u64;
    let negatives = cells.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::RocUndefined {
            positives,
            negatives,
        });
    }
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc = 0.0;
    let mut i = 0;
    while i < cells.len() {
        let score = cells[i].0;
        while i < cells.len() && cells[i].0 == score {
            if cells[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().expect("curve starts with a point");
        let point = RocPoint {
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
            threshold: score,
        };
        auc += (point.fpr - prev.fpr) * (point.tpr + prev.tpr) / 2.0;
        points.push(point);
    }
    Ok(RocCurve { points, auc })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    /// Exclusive; `None` for the overflow bucket.
    pub hi: Option<usize>,
    pub count: usize,
    /// Subset accuracy; absent for empty buckets.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucketReport {
    pub bucket_width: usize,
    pub buckets: Vec<LengthBucket>,
}

/// Subset accuracy per residue-length bucket `[k·w, (k+1)·w)` below
/// `limit`, plus one overflow bucket `[limit, ∞)`. `lengths` are the
/// original, pre-truncation residue counts.
pub fn length_analysis(
    lengths: &[usize],
    scores: &[Vec<f64>],
    targets: &[Vec<u8>],
    threshold: f64,
    bucket_width: usize,
    limit: usize,
) -> Result<LengthBucketReport> {
    check_shapes(scores, targets)?;
    if lengths.len() != scores.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} lengths vs {} score rows",
            lengths.len(),
            scores.len()
        )));
    }
    if bucket_width == 0 {
        return Err(MetricsError::InvalidBucketWidth);
    }
    let regular = limit.div_ceil(bucket_width);
    let mut counts = vec![(0usize, 0usize); regular + 1];
    for ((&len, s), t) in lengths.iter().zip(scores).zip(targets) {
        let b = if len >= limit {
            regular
        } else {
            len / bucket_width
        };
        counts[b].0 += 1;
        if row_correct(s, t, threshold) {
            counts[b].1 += 1;
        }
    }
    let buckets = counts
        .iter()
        .enumerate()
        .map(|(b, &(count, correct))| {
            let lo = if b == regular {
                limit
            } else {
                b * bucket_width
            };
            let hi = (b < regular).then(|| ((b + 1) * bucket_width).min(limit));
            LengthBucket {
                lo,
                hi,
                count,
                accuracy: (count > 0).then(|| correct as f64 / count as f64),
            }
        })
        .collect();
    Ok(LengthBucketReport {
        bucket_width,
        buckets,
    })
}

/// Headline numbers for one aspect at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectMetrics {
    pub aspect: GoAspect,
    pub samples: usize,
    pub labels: usize,
    pub confusion: ConfusionCounts,
    /// Exact-match accuracy.
    pub accuracy: f64,
    pub micro_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when every cell has the same target.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AspectEvaluation {
    pub metrics: AspectMetrics,
    pub roc: Option<RocCurve>,
    pub lengths: LengthBucketReport,
}

pub fn evaluate_aspect(
    aspect: GoAspect,
    lengths: &[usize],
    scores: &[Vec<f64>],
    targets: &[Vec<u8>],
    threshold: f64,
    bucket_width: usize,
) -> Result<AspectEvaluation> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    let counts = confusion(scores, targets, threshold)?;
    let p = prf1(&counts);
    let roc = match micro_roc(scores, targets) {
        Ok(r) => Some(r),
        Err(MetricsError::RocUndefined { .. }) => None,
        Err(e) => return Err(e),
    };
    let metrics = AspectMetrics {
        aspect,
        samples: scores.len(),
        labels: scores.first().map_or(0, Vec::len),
        confusion: counts,
        accuracy: subset_accuracy(scores, targets, threshold)?,
        micro_accuracy: micro_accuracy(&counts),
        precision: p.precision,
        recall: p.recall,
        f1: p.f1,
        auc: roc.as_ref().map(|r| r.auc),
    };
    let lengths = length_analysis(
        lengths,
        scores,
        targets,
        threshold,
        bucket_width,
        DEFAULT_BUCKET_LIMIT,
    )?;
    Ok(AspectEvaluation {
        metrics,
        roc,
        lengths,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub threshold: f64,
    pub bucket_width: usize,
    pub aspects: Vec<AspectMetrics>,
}

impl EvaluationReport {
    /// Aspect × {Accuracy, F1, Precision, Recall}.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>9} {:>9} {:>9} {:>9}",
            "Aspect", "Accuracy", "F1", "Precision", "Recall"
        );
        for a in &self.aspects {
            let _ = writeln!(
                out,
                "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                a.aspect.name(),
                a.accuracy,
                a.f1,
                a.precision,
                a.recall
            );
        }
        out
    }
}

fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x:.6}")
    }
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &curve.points {
        let _ = writeln!(
            out,
            "{},{},{}",
            fmt_f64(p.fpr),
            fmt_f64(p.tpr),
            fmt_f64(p.threshold)
        );
    }
    out
}

pub fn length_csv(report: &LengthBucketReport) -> String {
    let mut out = String::from("bucket_lo,bucket_hi,count,accuracy\n");
    for b in &report.buckets {
        let hi = b.hi.map_or_else(|| "inf".to_owned(), |h| h.to_string());
        let acc = b.accuracy.map_or_else(String::new, fmt_f64);
        let _ = writeln!(out, "{},{},{},{}", b.lo, hi, b.count, acc);
    }
    out
}

/// Writes `report.json`, `roc_<aspect>.csv` and `sla_<aspect>.csv` into
/// `dir`, returning the paths written.
pub fn write_report(
    dir: &Path,
    report: &EvaluationReport,
    details: &[AspectEvaluation],
) -> Result<Vec<PathBuf>> {
    let write = |path: PathBuf, contents: &str| -> Result<PathBuf> {
        fs::write(&path, contents).map_err(|source| MetricsError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    };
    fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    written.push(write(dir.join("report.json"), &(json + "\n"))?);
    for d in details {
        let code = d.metrics.aspect.code();
        if let Some(roc) = &d.roc {
            written.push(write(dir.join(format!("roc_{code}.csv")), &roc_csv(roc))?);
        }
        written.push(write(
            dir.join(format!("sla_{code}.csv")),
            &length_csv(&d.lengths),
        )?);
    }
    Ok(written)
}
