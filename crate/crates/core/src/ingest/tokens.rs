use super::{IngestError, Result};
use serde::{Deserialize, Serialize};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;

/// The 20 standard amino acids plus the ambiguity and rare codes B, O, U, X, Z,
/// in alphabetical order. Residue `i` of this string has token id `5 + i`.
pub const RESIDUE_ALPHABET: &str = "ABCDEFGHIKLMNOPQRSTUVWXYZ";

const FIRST_RESIDUE_ID: u32 = 5;
pub const VOCAB_SIZE: usize = 30;

/// Token id of an uppercase residue letter.
pub fn residue_id(residue: char) -> Option<u32> {
    RESIDUE_ALPHABET
        .find(residue)
        .map(|i| FIRST_RESIDUE_ID + i as u32)
}

/// Fixed symbol table: five specials then the residue alphabet.
#[derive(Clone, Copy, Debug, Default)]
pub struct TokenVocabulary;

impl TokenVocabulary {
    pub const SPECIALS: [&'static str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn symbol(&self, id: u32) -> Option<String> {
        match id {
            0..=4 => Some(Self::SPECIALS[id as usize].to_owned()),
            _ => RESIDUE_ALPHABET
                .chars()
                .nth((id - FIRST_RESIDUE_ID) as usize)
                .map(String::from),
        }
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        if let Some(i) = Self::SPECIALS.iter().position(|s| *s == symbol) {
            return Some(i as u32);
        }
        let mut chars = symbol.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => residue_id(c),
            _ => None,
        }
    }

    pub fn is_residue(id: u32) -> bool {
        (FIRST_RESIDUE_ID..VOCAB_SIZE as u32).contains(&id)
    }
}

/// `[CLS] residues… [SEP]`, possibly truncated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Residue count before truncation.
    pub original_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions holding residues (or masks/unknowns), i.e. not CLS/SEP/PAD.
    pub fn interior_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != CLS_ID && id != SEP_ID && id != PAD_ID)
            .map(|(i, _)| i)
    }

    pub fn is_truncated(&self) -> bool {
        self.original_length + 2 > self.ids.len()
    }

    /// Ids padded with PAD up to `len`.
    pub fn padded(&self, len: usize) -> Vec<u32> {
        let mut ids = self.ids.clone();
        ids.resize(len.max(ids.len()), PAD_ID);
        ids
    }
}

/// Keeps the first `max_len` residues.
pub fn tokenize(sequence: &str, max_len: usize) -> Result<TokenSequence> {
    if sequence.is_empty() {
        return Err(IngestError::EmptySequence);
    }
    let mut ids = Vec::with_capacity(sequence.len().min(max_len) + 2);
    ids.push(CLS_ID);
    let mut original_length = 0;
    for c in sequence.chars() {
        let id = residue_id(c).ok_or(IngestError::InvalidResidue(c))?;
        if original_length < max_len {
            ids.push(id);
        }
        original_length += 1;
    }
    ids.push(SEP_ID);
    Ok(TokenSequence {
        ids,
        original_length,
    })
}

/// Residue string of the interior tokens; `None` if a non-residue id appears.
pub fn detokenize(tokens: &TokenSequence) -> Option<String> {
    let vocab = TokenVocabulary;
    tokens
        .interior_positions()
        .map(|i| {
            let id = tokens.ids[i];
            TokenVocabulary::is_residue(id)
                .then(|| vocab.symbol(id))
                .flatten()
        })
        .collect()
}
