//! Run manifests: what a command read, what it wrote, and with which settings.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Effective configuration and arguments.
    pub config: serde_json::Value,
    /// Command-specific results worth keeping next to the digests.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let mut file =
        fs::File::open(path).with_context(|| format!("cannot hash {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = file
            .read(&mut buf)
            .with_context(|| format!("cannot hash {}", path.display()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(hasher.finalize()),
        bytes,
    })
}

/// Collects inputs and outputs while a command runs.
#[derive(Debug)]
pub struct Recorder {
    command: String,
    seed: Option<u64>,
    config: serde_json::Value,
    summary: serde_json::Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
    started_at: String,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Recorder {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_owned(),
            seed,
            config: serde_json::Value::Null,
            summary: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: now(),
        }
    }

    pub fn set_config(&mut self, config: serde_json::Value) {
        self.config = config;
    }

    pub fn set_summary(&mut self, summary: serde_json::Value) {
        self.summary = summary;
    }

    /// Hashed now, so a file the command later overwrites is recorded as read.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        if !self.inputs.iter().any(|d| d.path == path) {
            self.inputs.push(digest_file(path)?);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        if !self.outputs.iter().any(|p| p == path) {
            self.outputs.push(path.to_path_buf());
        }
    }

    /// Hashes the outputs and writes `<dir>/<command>.manifest.json`
    /// via a temporary file and rename.
    pub fn finish(self, dir: &Path) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.clone(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed: self.seed,
            config: self.config,
            summary: self.summary,
            inputs: self.inputs,
            outputs: self
                .outputs
                .iter()
                .map(|p| digest_file(p))
                .collect::<Result<_>>()?,
            started_at: self.started_at,
            finished_at: now(),
        };
        let path = dir.join(format!("{}.manifest.json", self.command));
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&tmp, text).with_context(|| format!("cannot write {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a run manifest", path.display()))
}

/// Inputs whose current digest differs from the recorded one.
pub fn drifted_inputs(manifest: &RunManifest) -> Result<Vec<PathBuf>> {
    let mut drifted = Vec::new();
    for recorded in &manifest.inputs {
        let now = digest_file(&recorded.path)?;
        if now.sha256 != recorded.sha256 {
            drifted.push(recorded.path.clone());
        }
    }
    Ok(drifted)
}

pub fn verify(path: &Path) -> Result<usize> {
    let manifest = read_manifest(path)?;
    let drifted = drifted_inputs(&manifest)?;
    if !drifted.is_empty() {
        let list: Vec<String> = drifted.iter().map(|p| p.display().to_string()).collect();
        bail!(
            "inputs changed since the {} run: {}",
            manifest.command,
            list.join(", ")
        );
    }
    Ok(manifest.inputs.len())
}
