use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

/// The three GO namespaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GoAspect {
    #[serde(rename = "BP")]
    BiologicalProcess,
    #[serde(rename = "MF")]
    MolecularFunction,
    #[serde(rename = "CC")]
    CellularComponent,
}

impl GoAspect {
    pub const ALL: [GoAspect; 3] = [
        GoAspect::BiologicalProcess,
        GoAspect::MolecularFunction,
        GoAspect::CellularComponent,
    ];

    /// Two-letter code used in every file format.
    pub fn code(self) -> &'static str {
        match self {
            GoAspect::BiologicalProcess => "BP",
            GoAspect::MolecularFunction => "MF",
            GoAspect::CellularComponent => "CC",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GoAspect::BiologicalProcess => "Biological Process",
            GoAspect::MolecularFunction => "Molecular Function",
            GoAspect::CellularComponent => "Cellular Component",
        }
    }
}

impl fmt::Display for GoAspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for GoAspect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "BP" => Ok(GoAspect::BiologicalProcess),
            "MF" => Ok(GoAspect::MolecularFunction),
            "CC" => Ok(GoAspect::CellularComponent),
            other => Err(format!("unknown GO aspect '{other}'")),
        }
    }
}

/// A `GO:NNNNNNN` identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GoTerm(String);

impl GoTerm {
    pub fn parse(s: &str) -> Option<Self> {
        let digits = s.strip_prefix("GO:")?;
        (digits.len() == 7 && digits.bytes().all(|b| b.is_ascii_digit()))
            .then(|| GoTerm(s.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for GoTerm {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        GoTerm::parse(&s).ok_or_else(|| format!("invalid GO identifier '{s}'"))
    }
}

impl From<GoTerm> for String {
    fn from(t: GoTerm) -> String {
        t.0
    }
}

impl fmt::Display for GoTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Annotation {
    pub term: GoTerm,
    pub aspect: GoAspect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProteinRecord {
    pub accession: String,
    /// Uppercase residues from [`crate::ingest::RESIDUE_ALPHABET`].
    pub sequence: String,
    pub annotations: BTreeSet<Annotation>,
}

impl ProteinRecord {
    pub fn terms(&self, aspect: GoAspect) -> impl Iterator<Item = &GoTerm> {
        self.annotations
            .iter()
            .filter(move |a| a.aspect == aspect)
            .map(|a| &a.term)
    }

    pub fn has_aspect(&self, aspect: GoAspect) -> bool {
        self.annotations.iter().any(|a| a.aspect == aspect)
    }
}

/// Drops records without any GO annotation, keeping order.
pub fn filter_unannotated(records: Vec<ProteinRecord>) -> Vec<ProteinRecord> {
    records
        .into_iter()
        .filter(|r| !r.annotations.is_empty())
        .collect()
}
