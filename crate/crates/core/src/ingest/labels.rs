use super::record::{GoAspect, GoTerm, ProteinRecord};
use super::{IngestError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

/// The top-K terms of one aspect, most populous first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub aspect: GoAspect,
    pub terms: Vec<GoTerm>,
    pub counts: Vec<usize>,
}

impl LabelVocabulary {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index_of(&self, term: &GoTerm) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    fn lookup(&self) -> HashMap<&GoTerm, usize> {
        self.terms.iter().enumerate().map(|(i, t)| (t, i)).collect()
    }
}

/// Dense 0/1 target aligned with a [`LabelVocabulary`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub aspect: GoAspect,
    pub bits: Vec<u8>,
}

impl LabelVector {
    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    pub fn to_bit_string(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b == 1 { '1' } else { '0' })
            .collect()
    }

    pub fn from_bit_string(aspect: GoAspect, s: &str) -> Option<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Some(0),
                '1' => Some(1),
                _ => None,
            })
            .collect::<Option<Vec<u8>>>()?;
        Some(Self { aspect, bits })
    }
}

/// Counts each term once per record. Ties in count are broken by ascending
/// GO identifier.
pub fn build_vocabulary(
    records: &[ProteinRecord],
    aspect: GoAspect,
    k: usize,
) -> Result<LabelVocabulary> {
    let mut counts: BTreeMap<&GoTerm, usize> = BTreeMap::new();
    for r in records {
        for t in r.terms(aspect) {
            *counts.entry(t).or_default() += 1;
        }
    }
    if k == 0 || counts.len() < k {
        return Err(IngestError::InsufficientTerms {
            aspect,
            requested: k,
            available: counts.len(),
        });
    }
    let mut ranked: Vec<(&GoTerm, usize)> = counts.into_iter().collect();
    // BTreeMap order is ascending by id; a stable sort on count keeps it for ties.
    ranked.sort_by_key(|&(_, c)| std::cmp::Reverse(c));
    ranked.truncate(k);
    Ok(LabelVocabulary {
        aspect,
        terms: ranked.iter().map(|(t, _)| (*t).clone()).collect(),
        counts: ranked.iter().map(|(_, c)| *c).collect(),
    })
}

/// Terms outside the vocabulary are ignored.
pub fn encode_labels(record: &ProteinRecord, vocab: &LabelVocabulary) -> LabelVector {
    let lookup = vocab.lookup();
    let mut bits = vec![0u8; vocab.len()];
    for t in record.terms(vocab.aspect) {
        if let Some(&i) = lookup.get(t) {
            bits[i] = 1;
        }
    }
    LabelVector {
        aspect: vocab.aspect,
        bits,
    }
}

/// Records carrying at least one annotation of `aspect`, in input order.
pub fn aspect_records(records: &[ProteinRecord], aspect: GoAspect) -> Vec<&ProteinRecord> {
    records.iter().filter(|r| r.has_aspect(aspect)).collect()
}

/// Writes `rank<TAB>go_id<TAB>count` lines, rank starting at 1.
pub fn write_vocabulary<W: Write>(vocab: &LabelVocabulary, mut out: W) -> std::io::Result<()> {
    for (i, (t, c)) in vocab.terms.iter().zip(&vocab.counts).enumerate() {
        writeln!(out, "{}\t{}\t{}", i + 1, t, c)?;
    }
    Ok(())
}

pub fn read_vocabulary<R: BufRead>(aspect: GoAspect, reader: R) -> Result<LabelVocabulary> {
    let mut terms = Vec::new();
    let mut counts = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| IngestError::Io {
            path: format!("<{} vocabulary>", aspect).into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| IngestError::Malformed {
            line: line_no,
            reason,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(malformed(format!(
                "expected 3 columns, found {}",
                cols.len()
            )));
        }
        let rank: usize = cols[0]
            .parse()
            .map_err(|_| malformed(format!("bad rank '{}'", cols[0])))?;
        if rank != terms.len() + 1 {
            return Err(malformed(format!("rank {rank} out of sequence")));
        }
        terms.push(
            GoTerm::parse(cols[1]).ok_or_else(|| IngestError::InvalidGoId {
                id: cols[1].to_owned(),
                line: line_no,
            })?,
        );
        counts.push(
            cols[2]
                .parse()
                .map_err(|_| malformed(format!("bad count '{}'", cols[2])))?,
        );
    }
    Ok(LabelVocabulary {
        aspect,
        terms,
        counts,
    })
}
