//! Runs the three aspect models on one sequence and merges their
//! thresholded outputs into a single annotation set.

use crate::ingest::{
    normalize_sequence, parse_tsv_line, tokenize, GoAspect, GoTerm, IngestError, LabelVocabulary,
    TokenSequence,
};
use crate::model::{Model, ModelError};
pub use protgo_tensor::sigmoid;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Records scored together before their output lines are written.
const BATCH_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no model for aspect {0}")]
    MissingAspect(GoAspect),
    #[error("two models supplied for aspect {0}")]
    DuplicateAspect(GoAspect),
    #[error("{aspect}: vocabulary has {vocabulary} terms but the model has {num_labels} labels")]
    VocabularyMismatch {
        aspect: GoAspect,
        vocabulary: usize,
        num_labels: usize,
    },
    #[error("aspect models disagree on max_len ({first} vs {second})")]
    MaxLenMismatch { first: usize, second: usize },
    #[error("threshold must be in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Clone, Debug)]
pub struct AspectModel {
    pub model: Model,
    pub vocabulary: LabelVocabulary,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    aspects: BTreeMap<GoAspect, AspectModel>,
    threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedTerm {
    pub term: GoTerm,
    pub aspect: GoAspect,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub accession: String,
    /// Sigmoid scores, one vector per aspect in vocabulary order.
    pub scores: BTreeMap<GoAspect, Vec<f64>>,
    /// Terms scoring at least the threshold, by aspect then vocabulary order.
    pub predicted_terms: Vec<PredictedTerm>,
}

impl Prediction {
    /// Output lines in the `accession go_id aspect score` TSV format.
    pub fn tsv_lines(&self) -> String {
        if self.predicted_terms.is_empty() {
            return format!("{}\t-\t-\t-\n", self.accession);
        }
        self.predicted_terms
            .iter()
            .map(|p| {
                format!(
                    "{}\t{}\t{}\t{:.6}\n",
                    self.accession, p.term, p.aspect, p.score
                )
            })
            .collect()
    }
}

/// A record that could not be scored; batch processing carries on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchSummary {
    pub processed: usize,
    pub diagnostics: Vec<Diagnostic>,
}

impl FusionModel {
    /// Needs exactly one model per aspect, each paired with the vocabulary
    /// of that aspect and sized to it.
    pub fn new(models: Vec<(Model, LabelVocabulary)>) -> Result<Self> {
        let mut aspects = BTreeMap::new();
        let mut max_len = None;
        for (model, vocabulary) in models {
            let aspect = vocabulary.aspect;
            if vocabulary.len() != model.config.num_labels {
                return Err(FusionError::VocabularyMismatch {
                    aspect,
                    vocabulary: vocabulary.len(),
                    num_labels: model.config.num_labels,
                });
            }
            match max_len {
                None => max_len = Some(model.config.max_len),
                Some(m) if m != model.config.max_len => {
                    return Err(FusionError::MaxLenMismatch {
                        first: m,
                        second: model.config.max_len,
                    })
                }
                _ => {}
            }
            if aspects
                .insert(aspect, AspectModel { model, vocabulary })
                .is_some()
            {
                return Err(FusionError::DuplicateAspect(aspect));
            }
        }
        for aspect in GoAspect::ALL {
            if !aspects.contains_key(&aspect) {
                return Err(FusionError::MissingAspect(aspect));
            }
        }
        Ok(Self {
            aspects,
            threshold: DEFAULT_THRESHOLD,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FusionError::InvalidThreshold(t));
        }
        self.threshold = t;
        Ok(())
    }

    pub fn aspect(&self, aspect: GoAspect) -> Result<&AspectModel> {
        self.aspects
            .get(&aspect)
            .ok_or(FusionError::MissingAspect(aspect))
    }

    pub fn aspect_mut(&mut self, aspect: GoAspect) -> Result<&mut AspectModel> {
        self.aspects
            .get_mut(&aspect)
            .ok_or(FusionError::MissingAspect(aspect))
    }

    pub fn max_len(&self) -> usize {
        self.aspects
            .values()
            .next()
            .map_or(0, |a| a.model.config.max_len)
    }

    /// Sigmoid scores of one aspect model.
    pub fn aspect_scores(&self, aspect: GoAspect, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let logits = self.aspect(aspect)?.model.forward_classify(tokens)?;
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    pub fn predict(&self, accession: &str, sequence: &str) -> Result<Prediction> {
        let tokens = tokenize(sequence, self.max_len())?;
        self.predict_tokens(accession, &tokens)
    }

    pub fn predict_tokens(&self, accession: &str, tokens: &TokenSequence) -> Result<Prediction> {
        let scored: Vec<(GoAspect, Vec<f64>)> = GoAspect::ALL
            .par_iter()
            .map(|&a| self.aspect_scores(a, tokens).map(|s| (a, s)))
            .collect::<Result<_>>()?;
        let scores: BTreeMap<GoAspect, Vec<f64>> = scored.into_iter().collect();
        Ok(Prediction {
            accession: accession.to_owned(),
            predicted_terms: self.threshold_scores(&scores),
            scores,
        })
    }

    /// Applies the current threshold to already computed scores.
    pub fn threshold_scores(&self, scores: &BTreeMap<GoAspect, Vec<f64>>) -> Vec<PredictedTerm> {
        let mut out = Vec::new();
        for aspect in GoAspect::ALL {
            let (Some(s), Some(a)) = (scores.get(&aspect), self.aspects.get(&aspect)) else {
                continue;
            };
            for (term, &score) in a.vocabulary.terms.iter().zip(s) {
                if score >= self.threshold {
                    out.push(PredictedTerm {
                        term: term.clone(),
                        aspect,
                        score,
                    });
                }
            }
        }
        out
    }

    /// Streams `input` (TSV or FASTA; annotations are ignored) into a
    /// prediction TSV at `output`. Records that fail to parse are reported
    /// with their line number and skipped. The output file is replaced
    /// atomically once every record has been written.
    pub fn predict_batch(&self, input: &Path, output: &Path) -> Result<BatchSummary> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| FusionError::Io {
                path: path.clone(),
                source,
            }
        };
        let reader = BufReader::new(File::open(input).map_err(io_err(input))?);
        let tmp = output.with_extension("tmp");
        let mut writer = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        let mut summary = BatchSummary::default();
        let mut pending: Vec<(usize, String, String)> = Vec::new();

        let mut flush = |pending: &mut Vec<(usize, String, String)>,
                         summary: &mut BatchSummary|
         -> Result<()> {
            let results: Vec<(usize, Result<Prediction>)> = pending
                .par_iter()
                .map(|(line, acc, seq)| (*line, self.predict(acc, seq)))
                .collect();
            for (line, r) in results {
                match r {
                    Ok(p) => {
                        writer
                            .write_all(p.tsv_lines().as_bytes())
                            .map_err(io_err(&tmp))?;
                        summary.processed += 1;
                    }
                    Err(FusionError::Ingest(e)) => summary.diagnostics.push(Diagnostic {
                        line,
                        message: e.to_string(),
                    }),
                    Err(e) => return Err(e),
                }
            }
            pending.clear();
            Ok(())
        };

        let mut records = RecordStream::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(input))?;
            records.push_line(i + 1, &line, &mut pending, &mut summary.diagnostics);
            if pending.len() >= BATCH_CHUNK {
                flush(&mut pending, &mut summary)?;
            }
        }
        records.finish(&mut pending, &mut summary.diagnostics);
        flush(&mut pending, &mut summary)?;

        writer.flush().map_err(io_err(&tmp))?;
        drop(writer);
        fs::rename(&tmp, output).map_err(io_err(output))?;
        for d in &summary.diagnostics {
            log::warn!("{}:{}: {}", input.display(), d.line, d.message);
        }
        Ok(summary)
    }
}

/// Line-driven record reader accepting either the TSV format or FASTA,
/// decided by the first non-blank line.
#[derive(Default)]
struct RecordStream {
    fasta: Option<bool>,
    current: Option<FastaRecord>,
}

struct FastaRecord {
    line: usize,
    accession: String,
    sequence: String,
    error: Option<String>,
}

impl RecordStream {
    fn push_line(
        &mut self,
        line_no: usize,
        line: &str,
        out: &mut Vec<(usize, String, String)>,
        diagnostics: &mut Vec<Diagnostic>,
    ) {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            return;
        }
        let fasta = *self.fasta.get_or_insert_with(|| trimmed.starts_with('>'));
        if !fasta {
            match parse_tsv_line(line, line_no) {
                Ok(Some(r)) => out.push((line_no, r.accession, r.sequence)),
                Ok(None) => {}
                Err(e) => diagnostics.push(Diagnostic {
                    line: line_no,
                    message: e.to_string(),
                }),
            }
            return;
        }
        if trimmed.starts_with(';') {
            return;
        }
        if let Some(header) = trimmed.strip_prefix('>') {
            self.finish(out, diagnostics);
            self.current = Some(match header.split_whitespace().next() {
                Some(acc) => FastaRecord {
                    line: line_no,
                    accession: acc.to_owned(),
                    sequence: String::new(),
                    error: None,
                },
                None => FastaRecord {
                    line: line_no,
                    accession: String::new(),
                    sequence: String::new(),
                    error: Some("empty FASTA header".into()),
                },
            });
            return;
        }
        match self.current.as_mut() {
            None => diagnostics.push(Diagnostic {
                line: line_no,
                message: "sequence data before the first header".into(),
            }),
            Some(rec) if rec.error.is_none() => match normalize_sequence(trimmed, line_no) {
                Ok(s) => rec.sequence.push_str(&s),
                Err(e) => rec.error = Some(e.to_string()),
            },
            Some(_) => {}
        }
    }

    fn finish(
        &mut self,
        out: &mut Vec<(usize, String, String)>,
        diagnostics: &mut Vec<Diagnostic>,
    ) {
        let Some(rec) = self.current.take() else {
            return;
        };
        let error = rec.error.or_else(|| {
            rec.sequence
                .is_empty()
                .then(|| format!("record '{}' has no sequence", rec.accession))
        });
        match error {
            Some(message) => diagnostics.push(Diagnostic {
                line: rec.line,
                message,
            }),
            None => out.push((rec.line, rec.accession, rec.sequence)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn vocab(aspect: GoAspect, n: usize, offset: usize) -> LabelVocabulary {
        LabelVocabulary {
            aspect,
            terms: (0..n)
                .map(|i| GoTerm::parse(&format!("GO:{:07}", offset + i)).unwrap())
                .collect(),
            counts: vec![1; n],
        }
    }

    fn fusion(labels: usize) -> FusionModel {
        let models = GoAspect::ALL
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let cfg = ModelConfig {
                    num_layers: 1,
                    d_model: 8,
                    num_heads: 2,
                    d_ff: 16,
                    max_len: 32,
                    num_labels: labels,
                    ..ModelConfig::default()
                };
                (
                    Model::init(cfg, 10 + i as u64).unwrap(),
                    vocab(a, labels, 1000 * (i + 1)),
                )
            })
            .collect();
        FusionModel::new(models).unwrap()
    }

    /// Pushes every logit of one aspect far above or below zero.
    fn saturate(f: &mut FusionModel, aspect: GoAspect, bias: f64) {
        let m = &mut f.aspect_mut(aspect).unwrap().model;
        m.param_mut("classifier.weight").unwrap().data.fill(0.0);
        m.param_mut("classifier.bias").unwrap().data.fill(bias);
    }

    #[test]
    fn construction_errors() {
        let f = fusion(3);
        let mut parts: Vec<(Model, LabelVocabulary)> = GoAspect::ALL
            .iter()
            .map(|&a| {
                let m = f.aspect(a).unwrap();
                (m.model.clone(), m.vocabulary.clone())
            })
            .collect();
        let dropped = parts.pop().unwrap();
        assert!(matches!(
            FusionModel::new(parts.clone()),
            Err(FusionError::MissingAspect(GoAspect::CellularComponent))
        ));
        parts.push((dropped.0.clone(), vocab(GoAspect::CellularComponent, 5, 0)));
        let err = FusionModel::new(parts.clone()).unwrap_err();
        assert!(
            err.to_string().contains("5 terms") && err.to_string().contains("3 labels"),
            "{err}"
        );
        parts.pop();
        parts.push(parts[0].clone());
        assert!(matches!(
            FusionModel::new(parts),
            Err(FusionError::DuplicateAspect(_))
        ));
    }

    #[test]
    fn threshold_semantics() {
        let mut f = fusion(4);
        assert_eq!(f.threshold(), 0.5);
        for a in GoAspect::ALL {
            saturate(&mut f, a, -50.0);
        }
        let p = f.predict("P1", "MKVLA").unwrap();
        assert!(p.predicted_terms.is_empty());
        assert!(p.scores.values().all(|s| s.len() == 4));
        assert_eq!(p.tsv_lines(), "P1\t-\t-\t-\n");

        saturate(&mut f, GoAspect::MolecularFunction, 50.0);
        let p = f.predict("P1", "MKVLA").unwrap();
        assert_eq!(p.predicted_terms.len(), 4);
        assert!(p
            .predicted_terms
            .iter()
            .all(|t| t.aspect == GoAspect::MolecularFunction));
        assert!(p.tsv_lines().starts_with("P1\tGO:0002000\tMF\t1.000000\n"));

        f.set_threshold(0.0).unwrap();
        assert_eq!(f.predict("P1", "MKVLA").unwrap().predicted_terms.len(), 12);
        f.set_threshold(1.0).unwrap();
        let p = f.predict("P1", "MKVLA").unwrap();
        assert!(p.predicted_terms.iter().all(|t| t.score == 1.0));
        assert!(f.set_threshold(1.01).is_err());
        assert!(f.set_threshold(-0.1).is_err());
        assert!(f.set_threshold(f64::NAN).is_err());
        assert!(matches!(f.predict("P1", "M1"), Err(FusionError::Ingest(_))));
    }

    #[test]
    fn raising_threshold_never_adds_terms() {
        let mut f = fusion(20);
        let sequences = ["MKVLAAGIVG", "WWPPQRSTNN", "ACDEFGHIKLMNPQRSTVWY"];
        for s in sequences {
            let mut prev: Option<Vec<PredictedTerm>> = None;
            for k in 0..=20 {
                f.set_threshold(k as f64 / 20.0).unwrap();
                let cur = f.predict("x", s).unwrap().predicted_terms;
                if let Some(prev) = &prev {
                    assert!(cur.iter().all(|t| prev.contains(t)));
                }
                prev = Some(cur);
            }
        }
    }

    #[test]
    fn aspects_are_independent_and_share_tokens() {
        let f = fusion(5);
        let tokens = tokenize("MKTAYIAKQRQISFVKSHFSRQ", f.max_len()).unwrap();
        let base = f.predict_tokens("a", &tokens).unwrap();
        for a in GoAspect::ALL {
            let standalone = f
                .aspect(a)
                .unwrap()
                .model
                .forward_classify(&tokens)
                .unwrap();
            let standalone: Vec<f64> = standalone.into_iter().map(sigmoid).collect();
            assert_eq!(base.scores[&a], standalone);
        }
        let mut g = f.clone();
        g.aspect_mut(GoAspect::BiologicalProcess)
            .unwrap()
            .model
            .param_mut("layer_0.ffn.inner.weight")
            .unwrap()
            .data
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x += 0.1 * (i % 7) as f64);
        let changed = g.predict_tokens("a", &tokens).unwrap();
        assert_ne!(
            changed.scores[&GoAspect::BiologicalProcess],
            base.scores[&GoAspect::BiologicalProcess]
        );
        assert_eq!(
            changed.scores[&GoAspect::MolecularFunction],
            base.scores[&GoAspect::MolecularFunction]
        );
        assert_eq!(
            changed.scores[&GoAspect::CellularComponent],
            base.scores[&GoAspect::CellularComponent]
        );
    }

    #[test]
    fn batch_tsv() {
        let mut f = fusion(3);
        f.set_threshold(0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.tsv");
        let output = dir.path().join("out.tsv");
        fs::write(
            &input,
            "P1\tMKVLA\nP2\tMK1VLA\n\nP3\tWWPQ\tGO:0000001|MF\nP4\tMKVLA\n",
        )
        .unwrap();
        let s = f.predict_batch(&input, &output).unwrap();
        assert_eq!(s.processed, 3);
        assert_eq!(s.diagnostics.len(), 1);
        assert_eq!(s.diagnostics[0].line, 2);
        let out = fs::read_to_string(&output).unwrap();
        let accs: Vec<&str> = out.lines().map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(accs.len(), 27);
        assert!(accs[..9].iter().all(|&a| a == "P1"));
        assert!(accs[9..18].iter().all(|&a| a == "P3"));
        let p1: Vec<&str> = out
            .lines()
            .take(9)
            .map(|l| l.split_once('\t').unwrap().1)
            .collect();
        let p4: Vec<&str> = out
            .lines()
            .skip(18)
            .map(|l| l.split_once('\t').unwrap().1)
            .collect();
        assert_eq!(p1, p4);

        fs::write(&input, "").unwrap();
        let s = f.predict_batch(&input, &output).unwrap();
        assert_eq!(s, BatchSummary::default());
        assert_eq!(fs::read_to_string(&output).unwrap(), "");
        assert!(matches!(
            f.predict_batch(&dir.path().join("missing"), &output),
            Err(FusionError::Io { .. })
        ));
    }

    #[test]
    fn batch_fasta_and_ordering() {
        let mut f = fusion(2);
        for a in GoAspect::ALL {
            saturate(&mut f, a, -50.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.fa");
        let output = dir.path().join("out.tsv");
        let mut text = String::new();
        for i in 0..150 {
            text.push_str(&format!(">Q{i} some description\nMKV\nLAG\n"));
        }
        text.push_str(">BAD\nMK*\n>EMPTY\n>LAST\nWW\n");
        fs::write(&input, text).unwrap();
        let s = f.predict_batch(&input, &output).unwrap();
        assert_eq!(s.processed, 151);
        let lines: Vec<usize> = s.diagnostics.iter().map(|d| d.line).collect();
        assert_eq!(lines, vec![451, 453]);
        let out = fs::read_to_string(&output).unwrap();
        let accs: Vec<String> = out
            .lines()
            .map(|l| l.split('\t').next().unwrap().to_owned())
            .collect();
        let mut expected: Vec<String> = (0..150).map(|i| format!("Q{i}")).collect();
        expected.push("LAST".into());
        assert_eq!(accs, expected);
    }
}
