//! Protein record ingestion, GO label vocabularies and residue tokenisation.
//!
//! Everything here is a pure per-record transformation; vocabularies are
//! immutable once built and may be shared across threads.

mod labels;
mod parse;
mod record;
mod tokens;

pub use labels::{
    aspect_records, build_vocabulary, encode_labels, read_vocabulary, write_vocabulary,
    LabelVector, LabelVocabulary,
};
pub(crate) use parse::normalize_sequence;
pub use parse::{
    parse_fasta_with_annotations, parse_records, parse_tsv, parse_tsv_line, InputFormat,
};
pub use record::{filter_unannotated, Annotation, GoAspect, GoTerm, ProteinRecord};
pub use tokens::{
    detokenize, residue_id, tokenize, TokenSequence, TokenVocabulary, CLS_ID, MASK_ID, PAD_ID,
    RESIDUE_ALPHABET, SEP_ID, UNK_ID, VOCAB_SIZE,
};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed input at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("unknown residue '{residue}' at line {line}")]
    UnknownResidue { residue: char, line: usize },
    #[error("invalid GO identifier '{id}' at line {line}")]
    InvalidGoId { id: String, line: usize },
    #[error("unknown GO aspect '{aspect}' at line {line}")]
    InvalidAspect { aspect: String, line: usize },
    #[error("duplicate accession '{accession}' at line {line}")]
    DuplicateAccession { accession: String, line: usize },
    #[error("annotation for unknown accession '{accession}' at line {line}")]
    UnknownAccession { accession: String, line: usize },
    #[error("{aspect}: requested {requested} terms but only {available} distinct terms available")]
    InsufficientTerms {
        aspect: GoAspect,
        requested: usize,
        available: usize,
    },
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid residue '{0}'")]
    InvalidResidue(char),
}

pub type Result<T> = std::result::Result<T, IngestError>;
