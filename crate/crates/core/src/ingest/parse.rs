use super::record::{Annotation, GoAspect, GoTerm, ProteinRecord};
use super::tokens::residue_id;
use super::{IngestError, Result};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InputFormat {
    /// `accession<TAB>sequence<TAB>GO:NNNNNNN|ASPECT;…`
    Tsv,
    /// FASTA records plus an `accession<TAB>GO:NNNNNNN<TAB>ASPECT` file.
    FastaTsv { annotations: PathBuf },
}

pub fn parse_records(path: &Path, format: &InputFormat) -> Result<Vec<ProteinRecord>> {
    let open = |p: &Path| {
        File::open(p)
            .map(BufReader::new)
            .map_err(|source| IngestError::Io {
                path: p.to_path_buf(),
                source,
            })
    };
    match format {
        InputFormat::Tsv => parse_tsv(open(path)?, path),
        InputFormat::FastaTsv { annotations } => {
            parse_fasta_with_annotations(open(path)?, open(annotations)?, path, annotations)
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn normalize_sequence(raw: &str, line: usize) -> Result<String> {
    raw.chars()
        .map(|c| {
            let up = c.to_ascii_uppercase();
            residue_id(up)
                .map(|_| up)
                .ok_or(IngestError::UnknownResidue { residue: c, line })
        })
        .collect()
}

fn parse_term(id: &str, line: usize) -> Result<GoTerm> {
    GoTerm::parse(id).ok_or_else(|| IngestError::InvalidGoId {
        id: id.to_owned(),
        line,
    })
}

fn parse_aspect(code: &str, line: usize) -> Result<GoAspect> {
    code.parse().map_err(|_| IngestError::InvalidAspect {
        aspect: code.to_owned(),
        line,
    })
}

/// Parses one line of the primary TSV format. Blank lines and `#` comments
/// yield `None`. The annotation column may be empty or absent.
pub fn parse_tsv_line(line: &str, line_no: usize) -> Result<Option<ProteinRecord>> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.trim().is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let cols: Vec<&str> = line.split('\t').collect();
    if !(2..=3).contains(&cols.len()) {
        return Err(IngestError::Malformed {
            line: line_no,
            reason: format!(
                "expected 2 or 3 tab-separated columns, found {}",
                cols.len()
            ),
        });
    }
    let accession = cols[0].trim();
    if accession.is_empty() {
        return Err(IngestError::Malformed {
            line: line_no,
            reason: "empty accession".into(),
        });
    }
    let raw_seq = cols[1].trim();
    if raw_seq.is_empty() {
        return Err(IngestError::Malformed {
            line: line_no,
            reason: format!("empty sequence for '{accession}'"),
        });
    }
    let sequence = normalize_sequence(raw_seq, line_no)?;

    let mut annotations = BTreeSet::new();
    for entry in cols.get(2).copied().unwrap_or("").split(';') {
        let entry = entry.trim();
        if entry.is_empty() {
            continue;
        }
        let (id, aspect) = entry
            .split_once('|')
            .ok_or_else(|| IngestError::Malformed {
                line: line_no,
                reason: format!("annotation '{entry}' is not of the form GO:NNNNNNN|ASPECT"),
            })?;
        annotations.insert(Annotation {
            term: parse_term(id.trim(), line_no)?,
            aspect: parse_aspect(aspect.trim(), line_no)?,
        });
    }
    Ok(Some(ProteinRecord {
        accession: accession.to_owned(),
        sequence,
        annotations,
    }))
}

pub fn parse_tsv<R: BufRead>(reader: R, source: &Path) -> Result<Vec<ProteinRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(source))?;
        if let Some(rec) = parse_tsv_line(&line, i + 1)? {
            if !seen.insert(rec.accession.clone()) {
                return Err(IngestError::DuplicateAccession {
                    accession: rec.accession,
                    line: i + 1,
                });
            }
            records.push(rec);
        }
    }
    Ok(records)
}

/// FASTA bodies may wrap across lines. Headers contribute their first
/// whitespace-delimited token as the accession.
pub fn parse_fasta_with_annotations<R1: BufRead, R2: BufRead>(
    fasta: R1,
    annotations: R2,
    fasta_path: &Path,
    annotation_path: &Path,
) -> Result<Vec<ProteinRecord>> {
    let mut records: Vec<ProteinRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut header_line = 0;

    let finish = |records: &mut Vec<ProteinRecord>, header_line: usize| -> Result<()> {
        if let Some(last) = records.last() {
            if last.sequence.is_empty() {
                return Err(IngestError::Malformed {
                    line: header_line,
                    reason: format!("record '{}' has no sequence", last.accession),
                });
            }
        }
        Ok(())
    };

    for (i, line) in fasta.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(fasta_path))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            finish(&mut records, header_line)?;
            let accession = header
                .split_whitespace()
                .next()
                .ok_or_else(|| IngestError::Malformed {
                    line: line_no,
                    reason: "empty FASTA header".into(),
                })?
                .to_owned();
            if index.insert(accession.clone(), records.len()).is_some() {
                return Err(IngestError::DuplicateAccession {
                    accession,
                    line: line_no,
                });
            }
            header_line = line_no;
            records.push(ProteinRecord {
                accession,
                sequence: String::new(),
                annotations: BTreeSet::new(),
            });
        } else {
            let rec = records.last_mut().ok_or_else(|| IngestError::Malformed {
                line: line_no,
                reason: "sequence data before the first header".into(),
            })?;
            rec.sequence.push_str(&normalize_sequence(line, line_no)?);
        }
    }
    finish(&mut records, header_line)?;

    for (i, line) in annotations.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(annotation_path))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(IngestError::Malformed {
                line: line_no,
                reason: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let &idx = index
            .get(cols[0])
            .ok_or_else(|| IngestError::UnknownAccession {
                accession: cols[0].to_owned(),
                line: line_no,
            })?;
        records[idx].annotations.insert(Annotation {
            term: parse_term(cols[1], line_no)?,
            aspect: parse_aspect(cols[2], line_no)?,
        });
    }
    Ok(records)
}
