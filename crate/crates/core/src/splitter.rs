//! Train/dev/test partitioning.
//!
//! Two kinds of split: a seeded random 8:1:1 split, and a clustered split in
//! which whole sequence-similarity clusters are assigned to one side so that
//! near-duplicates never straddle train and test.
//!
//! Clustering is greedy leader clustering over k-mer multisets: records are
//! visited longest first and join the *first* existing cluster whose
//! representative is similar enough, otherwise they found a new cluster.
//! First-match (not best-match) keeps the result a deterministic function of
//! the visiting order.

use crate::ingest::ProteinRecord;
use crate::rng::{rng_for, Stream};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_KMER: usize = 5;
pub const DEFAULT_IDENTITY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("random split needs at least 10 records, got {0}")]
    TooFewRecords(usize),
    #[error("clustered split needs at least 3 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("split and cluster assignment disagree on accessions: {0}")]
    AccessionMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SplitError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Random,
    Clustered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub kind: SplitKind,
    pub seed: u64,
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
    /// Clustered splits only.
    pub identity_threshold: Option<f64>,
    pub kmer: Option<usize>,
}

impl DatasetSplit {
    pub fn parts(&self) -> [(&'static str, &[String]); 3] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffles with the seeded generator, then takes `⌊N/10⌋` each for dev and
/// test and the remainder for train. Each part is stored sorted.
pub fn random_split(accessions: &[String], seed: u64) -> Result<DatasetSplit> {
    let n = accessions.len();
    if n < 10 {
        return Err(SplitError::TooFewRecords(n));
    }
    let mut order = accessions.to_vec();
    order.shuffle(&mut rng_for(seed, Stream::Split, 0, 0));
    let tenth = n / 10;
    let mut test = order.split_off(n - tenth);
    let mut dev = order.split_off(n - 2 * tenth);
    let mut train = order;
    for part in [&mut train, &mut dev, &mut test] {
        part.sort();
    }
    Ok(DatasetSplit {
        kind: SplitKind::Random,
        seed,
        train,
        dev,
        test,
        identity_threshold: None,
        kmer: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// accession → cluster id
    pub cluster_of: BTreeMap<String, usize>,
    /// cluster id → representative accession
    pub representatives: Vec<String>,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.representatives.len()
    }

    /// Members per cluster id, each sorted.
    pub fn members(&self) -> Vec<Vec<&str>> {
        let mut out = vec![Vec::new(); self.representatives.len()];
        for (acc, &c) in &self.cluster_of {
            out[c].push(acc.as_str());
        }
        out
    }
}

type KmerCounts<'a> = HashMap<&'a [u8], u32>;

fn kmer_counts(seq: &[u8], k: usize) -> KmerCounts<'_> {
    let mut counts = HashMap::new();
    if seq.len() >= k {
        for w in seq.windows(k) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

struct Profile<'a> {
    seq: &'a [u8],
    counts: KmerCounts<'a>,
}

impl<'a> Profile<'a> {
    fn new(seq: &'a str, k: usize) -> Self {
        Self {
            seq: seq.as_bytes(),
            counts: kmer_counts(seq.as_bytes(), k),
        }
    }

    fn similarity(&self, other: &Profile<'_>, k: usize) -> f64 {
        let shorter = self.seq.len().min(other.seq.len());
        if shorter < k {
            return if self.seq == other.seq { 1.0 } else { 0.0 };
        }
        let (small, large) = if self.counts.len() <= other.counts.len() {
            (&self.counts, &other.counts)
        } else {
            (&other.counts, &self.counts)
        };
        let shared: u32 = small
            .iter()
            .map(|(kmer, &c)| c.min(large.get(kmer).copied().unwrap_or(0)))
            .sum();
        shared as f64 / (shorter - k + 1) as f64
    }
}

/// Shared k-mer multiset size divided by the k-mer count of the shorter
/// sequence. Sequences shorter than `k` compare equal or not at all.
pub fn kmer_similarity(a: &str, b: &str, k: usize) -> f64 {
    Profile::new(a, k).similarity(&Profile::new(b, k), k)
}

pub fn cluster_sequences(
    records: &[ProteinRecord],
    identity_threshold: f64,
    kmer: usize,
) -> Result<ClusterAssignment> {
    if kmer < 2 {
        return Err(SplitError::InvalidParameter(format!(
            "kmer must be at least 2, got {kmer}"
        )));
    }
    if !(identity_threshold > 0.0 && identity_threshold <= 1.0) {
        return Err(SplitError::InvalidParameter(format!(
            "identity threshold must be in (0, 1], got {identity_threshold}"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].sequence.len().cmp(&records[a].sequence.len()));

    let mut reps: Vec<(usize, Profile<'_>)> = Vec::new();
    let mut cluster_of = BTreeMap::new();
    for idx in order {
        let rec = &records[idx];
        let profile = Profile::new(&rec.sequence, kmer);
        let hit = reps
            .par_iter()
            .position_first(|(_, rep)| rep.similarity(&profile, kmer) >= identity_threshold);
        let cluster = match hit {
            Some(c) => c,
            None => {
                reps.push((idx, profile));
                reps.len() - 1
            }
        };
        cluster_of.insert(rec.accession.clone(), cluster);
    }
    Ok(ClusterAssignment {
        cluster_of,
        representatives: reps
            .iter()
            .map(|(i, _)| records[*i].accession.clone())
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const THIRDS: SplitRatios = SplitRatios {
        train: 1.0 / 3.0,
        dev: 1.0 / 3.0,
        test: 1.0 / 3.0,
    };

    fn validate(&self) -> Result<()> {
        let all = [self.train, self.dev, self.test];
        if all.iter().any(|r| !(0.0..=1.0).contains(r))
            || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(SplitError::InvalidParameter(format!(
                "ratios must be non-negative and sum to 1, got {all:?}"
            )));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::THIRDS
    }
}

/// Clusters are shuffled by `seed`, then each is placed whole into the split
/// currently furthest below its target record count (ties go to train, then
/// dev).
pub fn clustered_split(
    assignment: &ClusterAssignment,
    ratios: SplitRatios,
    seed: u64,
    identity_threshold: f64,
    kmer: usize,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    let members = assignment.members();
    if members.len() < 3 {
        return Err(SplitError::TooFewClusters(members.len()));
    }
    let n = assignment.cluster_of.len() as f64;
    let targets = [ratios.train * n, ratios.dev * n, ratios.test * n];
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.shuffle(&mut rng_for(seed, Stream::Cluster, 0, 0));

    let mut parts: [Vec<String>; 3] = Default::default();
    for c in order {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (i, target) in targets.iter().enumerate() {
            let deficit = target - parts[i].len() as f64;
            if deficit > best_deficit {
                best = i;
                best_deficit = deficit;
            }
        }
        parts[best].extend(members[c].iter().map(|s| s.to_string()));
    }
    let [mut train, mut dev, mut test] = parts;
    for part in [&mut train, &mut dev, &mut test] {
        part.sort();
    }
    Ok(DatasetSplit {
        kind: SplitKind::Clustered,
        seed,
        train,
        dev,
        test,
        identity_threshold: Some(identity_threshold),
        kmer: Some(kmer),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Cluster ids whose members appear in more than one split part.
    pub spanning_clusters: Vec<usize>,
}

impl LeakageReport {
    pub fn count(&self) -> usize {
        self.spanning_clusters.len()
    }
}

pub fn audit_leakage(
    split: &DatasetSplit,
    assignment: &ClusterAssignment,
) -> Result<LeakageReport> {
    let mut part_of: HashMap<&str, usize> = HashMap::new();
    for (i, (_, ids)) in split.parts().iter().enumerate() {
        for id in ids.iter() {
            if part_of.insert(id.as_str(), i).is_some() {
                return Err(SplitError::AccessionMismatch(format!(
                    "'{id}' appears in more than one part"
                )));
            }
        }
    }
    if part_of.len() != assignment.cluster_of.len() {
        return Err(SplitError::AccessionMismatch(format!(
            "split has {} accessions, assignment has {}",
            part_of.len(),
            assignment.cluster_of.len()
        )));
    }
    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); assignment.num_clusters()];
    for (acc, &c) in &assignment.cluster_of {
        let part = part_of
            .get(acc.as_str())
            .ok_or_else(|| SplitError::AccessionMismatch(format!("'{acc}' is not in the split")))?;
        seen[c].insert(*part);
    }
    Ok(LeakageReport {
        spanning_clusters: seen
            .iter()
            .enumerate()
            .filter(|(_, s)| s.len() > 1)
            .map(|(c, _)| c)
            .collect(),
    })
}

/// Writes `train.ids`, `dev.ids` and `test.ids` into `dir`.
pub fn write_split_files(dir: &Path, split: &DatasetSplit) -> Result<Vec<PathBuf>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SplitError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    for (name, ids) in split.parts() {
        let path = dir.join(format!("{name}.ids"));
        let mut f = io::BufWriter::new(fs::File::create(&path).map_err(io(&path))?);
        for id in ids {
            writeln!(f, "{id}").map_err(io(&path))?;
        }
        f.flush().map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|source| SplitError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            l.map(|s| s.trim().to_owned())
                .map_err(|source| SplitError::Io {
                    path: path.to_path_buf(),
                    source,
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn accs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("P{i:05}")).collect()
    }

    fn rec(acc: &str, seq: &str) -> ProteinRecord {
        ProteinRecord {
            accession: acc.into(),
            sequence: seq.into(),
            annotations: BTreeSet::new(),
        }
    }

    fn assert_partition(split: &DatasetSplit, input: &[String]) {
        let mut all: Vec<&String> = split.parts().iter().flat_map(|(_, p)| p.iter()).collect();
        all.sort();
        let mut expected: Vec<&String> = input.iter().collect();
        expected.sort();
        assert_eq!(all, expected);
    }

    #[test]
    fn random_split_sizes() {
        for (n, want) in [(100, (80, 10, 10)), (10, (8, 1, 1)), (101, (81, 10, 10))] {
            let s = random_split(&accs(n), 3).unwrap();
            assert_eq!((s.train.len(), s.dev.len(), s.test.len()), want);
            assert_partition(&s, &accs(n));
        }
        assert!(matches!(
            random_split(&accs(9), 0),
            Err(SplitError::TooFewRecords(9))
        ));
    }

    #[test]
    fn random_split_is_deterministic() {
        let a = random_split(&accs(50), 11).unwrap();
        assert_eq!(a, random_split(&accs(50), 11).unwrap());
        assert_ne!(a.test, random_split(&accs(50), 12).unwrap().test);
    }

    #[test]
    fn kmer_similarity_hand_cases() {
        assert_eq!(kmer_similarity("MKVLA", "MKVLA", 3), 1.0);
        assert_eq!(kmer_similarity("AAAAA", "CCCCC", 3), 0.0);
        // AAAAA → {AAA×3}; AAAAC → {AAA×2, AAC}; shared 2 of 3
        let s = kmer_similarity("AAAAA", "AAAAC", 3);
        assert!((s - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn clustering_examples() {
        let same = [rec("a", "MKVLAAGW"), rec("b", "MKVLAAGW")];
        let c = cluster_sequences(&same, 1.0, 3).unwrap();
        assert_eq!(c.num_clusters(), 1);

        let apart = [rec("a", "AAAAAA"), rec("b", "CCCCCC")];
        assert_eq!(cluster_sequences(&apart, 0.5, 3).unwrap().num_clusters(), 2);

        let near = [rec("a", "AAAAA"), rec("b", "AAAAC")];
        assert_eq!(cluster_sequences(&near, 0.5, 3).unwrap().num_clusters(), 1);
        assert_eq!(cluster_sequences(&near, 0.7, 3).unwrap().num_clusters(), 2);
    }

    #[test]
    fn clustering_rejects_bad_parameters() {
        let r = [rec("a", "MKV")];
        assert!(cluster_sequences(&r, 0.5, 1).is_err());
        assert!(cluster_sequences(&r, 0.0, 3).is_err());
        assert!(cluster_sequences(&r, 1.5, 3).is_err());
    }

    #[test]
    fn representatives_belong_to_their_cluster() {
        let recs: Vec<_> = ["MKVLAAGW", "MKVLAAGA", "CCCCCCCC", "WWWWPPPP", "MKVLAAGW"]
            .iter()
            .enumerate()
            .map(|(i, s)| rec(&format!("p{i}"), s))
            .collect();
        let c = cluster_sequences(&recs, 0.5, 3).unwrap();
        for (id, rep) in c.representatives.iter().enumerate() {
            assert_eq!(c.cluster_of[rep], id);
        }
    }

    fn singletons(n: usize) -> ClusterAssignment {
        ClusterAssignment {
            cluster_of: accs(n)
                .into_iter()
                .enumerate()
                .map(|(i, a)| (a, i))
                .collect(),
            representatives: accs(n),
        }
    }

    #[test]
    fn clustered_split_of_singletons_is_near_even() {
        let s = clustered_split(&singletons(31), SplitRatios::THIRDS, 5, 0.5, 5).unwrap();
        for (_, p) in s.parts() {
            assert!((p.len() as f64 - 31.0 / 3.0).abs() <= 1.0);
        }
        assert_partition(&s, &accs(31));
    }

    #[test]
    fn giant_cluster_stays_whole() {
        let all = accs(100);
        let mut cluster_of = BTreeMap::new();
        for (i, a) in all.iter().enumerate() {
            cluster_of.insert(a.clone(), if i < 90 { 0 } else { i - 89 });
        }
        let mut reps = vec![all[0].clone()];
        reps.extend(all[90..].iter().cloned());
        let assignment = ClusterAssignment {
            cluster_of,
            representatives: reps,
        };
        for seed in 0..5 {
            let s = clustered_split(&assignment, SplitRatios::THIRDS, seed, 0.5, 5).unwrap();
            let holder = s
                .parts()
                .iter()
                .filter(|(_, p)| p.contains(&all[0]))
                .count();
            assert_eq!(holder, 1);
            let part = s
                .parts()
                .into_iter()
                .find(|(_, p)| p.contains(&all[0]))
                .unwrap()
                .1;
            assert!(all[..90].iter().all(|a| part.contains(a)));
            assert_eq!(audit_leakage(&s, &assignment).unwrap().count(), 0);
            assert_eq!(
                s,
                clustered_split(&assignment, SplitRatios::THIRDS, seed, 0.5, 5).unwrap()
            );
        }
    }

    #[test]
    fn clustered_split_needs_three_clusters() {
        assert!(matches!(
            clustered_split(&singletons(2), SplitRatios::THIRDS, 0, 0.5, 5),
            Err(SplitError::TooFewClusters(2))
        ));
        let bad = SplitRatios {
            train: 0.5,
            dev: 0.5,
            test: 0.5,
        };
        assert!(clustered_split(&singletons(5), bad, 0, 0.5, 5).is_err());
    }

    #[test]
    fn audit_flags_random_split_leakage() {
        // pair {a,b} forced into one cluster, then split across train/test
        let assignment = ClusterAssignment {
            cluster_of: [("a", 0), ("b", 0), ("c", 1)]
                .iter()
                .map(|(a, c)| (a.to_string(), *c))
                .collect(),
            representatives: vec!["a".into(), "c".into()],
        };
        let split = DatasetSplit {
            kind: SplitKind::Random,
            seed: 0,
            train: vec!["a".into(), "c".into()],
            dev: vec![],
            test: vec!["b".into()],
            identity_threshold: None,
            kmer: None,
        };
        let report = audit_leakage(&split, &assignment).unwrap();
        assert_eq!(report.spanning_clusters, vec![0]);

        let clean = DatasetSplit {
            train: vec!["a".into(), "b".into()],
            test: vec!["c".into()],
            ..split.clone()
        };
        assert_eq!(audit_leakage(&clean, &assignment).unwrap().count(), 0);

        let missing = DatasetSplit {
            test: vec![],
            ..split
        };
        assert!(matches!(
            audit_leakage(&missing, &assignment),
            Err(SplitError::AccessionMismatch(_))
        ));
    }

    #[test]
    fn split_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = random_split(&accs(20), 1).unwrap();
        let paths = write_split_files(dir.path(), &s).unwrap();
        assert_eq!(paths.len(), 3);
        assert_eq!(read_ids(&dir.path().join("train.ids")).unwrap(), s.train);
        assert_eq!(read_ids(&dir.path().join("test.ids")).unwrap(), s.test);
    }
}
