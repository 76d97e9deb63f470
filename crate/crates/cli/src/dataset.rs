//! On-disk layout of a preprocessed dataset:
//!
//! - `dataset.json`: parameters and per-aspect counts
//! - `records.tsv`: the annotated records in the primary TSV format
//! - `vocab_<ASPECT>.tsv`: label vocabularies
//! - `data_<ASPECT>.tsv`: `accession, original_length, token ids, label bits`
//!   for every record with at least one annotation of that aspect

use crate::manifest::Recorder;
use anyhow::{bail, Context, Result};
use protgo_core::ingest::{
    aspect_records, encode_labels, parse_tsv, read_vocabulary, tokenize, write_vocabulary,
    GoAspect, LabelVocabulary, ProteinRecord, TokenSequence,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectSummary {
    pub records: usize,
    pub terms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub top_k: usize,
    pub max_len: usize,
    pub records: usize,
    pub aspects: BTreeMap<GoAspect, AspectSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub accession: String,
    pub tokens: TokenSequence,
    pub bits: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub records: Vec<ProteinRecord>,
    pub vocabularies: BTreeMap<GoAspect, LabelVocabulary>,
    pub rows: BTreeMap<GoAspect, Vec<Row>>,
}

pub fn vocab_file(dir: &Path, aspect: GoAspect) -> PathBuf {
    dir.join(format!("vocab_{}.tsv", aspect.code()))
}

fn data_file(dir: &Path, aspect: GoAspect) -> PathBuf {
    dir.join(format!("data_{}.tsv", aspect.code()))
}

pub fn record_line(r: &ProteinRecord) -> String {
    let ann: Vec<String> = r
        .annotations
        .iter()
        .map(|a| format!("{}|{}", a.term, a.aspect))
        .collect();
    format!("{}\t{}\t{}\n", r.accession, r.sequence, ann.join(";"))
}

fn write(path: PathBuf, contents: &[u8], rec: &mut Recorder) -> Result<()> {
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    rec.output(&path);
    Ok(())
}

pub fn write_dataset(
    dir: &Path,
    records: &[ProteinRecord],
    vocabularies: &BTreeMap<GoAspect, LabelVocabulary>,
    top_k: usize,
    max_len: usize,
    rec: &mut Recorder,
) -> Result<DatasetInfo> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let all: String = records.iter().map(record_line).collect();
    write(dir.join("records.tsv"), all.as_bytes(), rec)?;

    let mut aspects = BTreeMap::new();
    for (&aspect, vocab) in vocabularies {
        let mut buf = Vec::new();
        write_vocabulary(vocab, &mut buf)?;
        write(vocab_file(dir, aspect), &buf, rec)?;

        let members = aspect_records(records, aspect);
        let mut data = String::new();
        for r in &members {
            let tokens = tokenize(&r.sequence, max_len)?;
            let ids: Vec<String> = tokens.ids.iter().map(u32::to_string).collect();
            let bits = encode_labels(r, vocab).to_bit_string();
            let _ = writeln!(
                data,
                "{}\t{}\t{}\t{}",
                r.accession,
                tokens.original_length,
                ids.join(" "),
                bits
            );
        }
        write(data_file(dir, aspect), data.as_bytes(), rec)?;
        aspects.insert(
            aspect,
            AspectSummary {
                records: members.len(),
                terms: vocab.len(),
            },
        );
    }
    let info = DatasetInfo {
        top_k,
        max_len,
        records: records.len(),
        aspects,
    };
    let json = serde_json::to_string_pretty(&info)? + "\n";
    write(dir.join("dataset.json"), json.as_bytes(), rec)?;
    Ok(info)
}

fn parse_row(line: &str, line_no: usize, path: &Path) -> Result<Row> {
    let bad = || format!("{}:{line_no}: malformed dataset row", path.display());
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 4 {
        bail!(bad());
    }
    let original_length = cols[1].parse().with_context(bad)?;
    let ids = cols[2]
        .split(' ')
        .map(str::parse)
        .collect::<std::result::Result<Vec<u32>, _>>()
        .with_context(bad)?;
    let bits = cols[3]
        .bytes()
        .map(|b| match b {
            b'0' => Ok(0),
            b'1' => Ok(1),
            _ => Err(anyhow::anyhow!(bad())),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(Row {
        accession: cols[0].to_owned(),
        tokens: TokenSequence {
            ids,
            original_length,
        },
        bits,
    })
}

pub fn read_vocab(path: &Path, aspect: GoAspect) -> Result<LabelVocabulary> {
    let f = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    read_vocabulary(aspect, BufReader::new(f)).with_context(|| format!("in {}", path.display()))
}

pub fn load_dataset(dir: &Path, rec: &mut Recorder) -> Result<Dataset> {
    let info_path = dir.join("dataset.json");
    let text = fs::read_to_string(&info_path)
        .with_context(|| format!("cannot read dataset {}", dir.display()))?;
    rec.input(&info_path)?;
    let info: DatasetInfo = serde_json::from_str(&text)
        .with_context(|| format!("{} is malformed", info_path.display()))?;

    let records_path = dir.join("records.tsv");
    let f = File::open(&records_path)
        .with_context(|| format!("cannot read {}", records_path.display()))?;
    let records = parse_tsv(BufReader::new(f), &records_path)?;
    rec.input(&records_path)?;

    let mut vocabularies = BTreeMap::new();
    let mut rows = BTreeMap::new();
    for &aspect in info.aspects.keys() {
        let vp = vocab_file(dir, aspect);
        vocabularies.insert(aspect, read_vocab(&vp, aspect)?);
        rec.input(&vp)?;
        let dp = data_file(dir, aspect);
        let text =
            fs::read_to_string(&dp).with_context(|| format!("cannot read {}", dp.display()))?;
        rec.input(&dp)?;
        let parsed = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| parse_row(l, i + 1, &dp))
            .collect::<Result<Vec<_>>>()?;
        rows.insert(aspect, parsed);
    }
    Ok(Dataset {
        info,
        records,
        vocabularies,
        rows,
    })
}

impl Dataset {
    /// Rows of `aspect` restricted to `ids` (all rows when `None`), in file order.
    pub fn rows_in(&self, aspect: GoAspect, ids: Option<&HashSet<String>>) -> Vec<&Row> {
        self.rows
            .get(&aspect)
            .map(|rows| {
                rows.iter()
                    .filter(|r| ids.is_none_or(|s| s.contains(&r.accession)))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn vocabulary(&self, aspect: GoAspect) -> Result<&LabelVocabulary> {
        self.vocabularies
            .get(&aspect)
            .with_context(|| format!("dataset has no {aspect} vocabulary"))
    }
}
