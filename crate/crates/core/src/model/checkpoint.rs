//! Binary checkpoint format.
//!
//! ```text
//! "PGO1"            4 bytes magic
//! header_len        u64, little-endian
//! header            header_len bytes of UTF-8 JSON
//! data              f64 little-endian arrays at the byte offsets the header
//!                   lists, relative to the start of this section
//! ```
//!
//! The header records the format version, model config, freeze mask, one
//! entry per array (`name`, `dtype`, `shape`, `offset`, `len`), the optional
//! optimizer moments, the RNG position and free-form metadata.

use super::params::expected_shapes;
use super::{FreezeMask, Model, ModelConfig, ModelError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PGO1";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 12;

/// Adam moments aligned with [`Model::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn zeros(model: &Model) -> Self {
        let z: Vec<Vec<f64>> = model
            .params
            .iter()
            .map(|p| vec![0.0; p.data.len()])
            .collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// Where the training loop stood when the checkpoint was written.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Epochs completed.
    pub epoch: u64,
    /// Optimizer steps completed.
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    pub rng_state: RngState,
    pub metadata: BTreeMap<String, String>,
}

impl ModelCheckpoint {
    pub fn new(model: Model) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model,
            optimizer: None,
            rng_state: RngState::default(),
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    m: Vec<ArrayEntry>,
    v: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    freeze_mask: FreezeMask,
    arrays: Vec<ArrayEntry>,
    optimizer: Option<OptimizerHeader>,
    rng_state: RngState,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

struct DataWriter {
    bytes: Vec<u8>,
}

impl DataWriter {
    fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) -> ArrayEntry {
        let offset = self.bytes.len() as u64;
        for x in data {
            self.bytes.extend_from_slice(&x.to_le_bytes());
        }
        ArrayEntry {
            name: name.to_owned(),
            dtype: "f64".into(),
            shape: shape.to_vec(),
            offset,
            len: data.len() as u64,
        }
    }
}

/// Serialises `ckpt` to bytes.
pub fn encode_checkpoint(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let mut data = DataWriter { bytes: Vec::new() };
    let arrays = model
        .params
        .iter()
        .map(|p| data.push(&p.name, &p.shape, &p.data))
        .collect();
    let optimizer = match &ckpt.optimizer {
        Some(opt) => {
            if opt.m.len() != model.params.len() || opt.v.len() != model.params.len() {
                return Err(ModelError::Header(
                    "optimizer state does not match the parameter list".into(),
                ));
            }
            let m = model
                .params
                .iter()
                .zip(&opt.m)
                .map(|(p, m)| data.push(&format!("adam.m/{}", p.name), &p.shape, m))
                .collect();
            let v = model
                .params
                .iter()
                .zip(&opt.v)
                .map(|(p, v)| data.push(&format!("adam.v/{}", p.name), &p.shape, v))
                .collect();
            Some(OptimizerHeader {
                step: opt.step,
                m,
                v,
            })
        }
        None => None,
    };
    let header = Header {
        format_version: ckpt.format_version,
        config: model.config.clone(),
        freeze_mask: model.freeze.clone(),
        arrays,
        optimizer,
        rng_state: ckpt.rng_state,
        metadata: ckpt.metadata.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| ModelError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + data.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data.bytes);
    Ok(out)
}

/// Writes via a temporary sibling file and a rename, so a crash never
/// leaves a half-written checkpoint under `path`.
pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let io = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, None)
}

/// Loads and checks every array against `expected` rather than the config
/// stored in the file.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, Some(expected))
}

fn read_array(data: &[u8], entry: &ArrayEntry) -> Result<Vec<f64>> {
    if entry.dtype != "f64" {
        return Err(ModelError::Header(format!(
            "array '{}' has unsupported dtype '{}'",
            entry.name, entry.dtype
        )));
    }
    let n: usize = entry.shape.iter().product();
    if n as u64 != entry.len {
        return Err(ModelError::Header(format!(
            "array '{}' declares {} elements for shape {:?}",
            entry.name, entry.len, entry.shape
        )));
    }
    let start = entry.offset as usize;
    let end = start
        .checked_add(n * 8)
        .ok_or_else(|| ModelError::Header(format!("array '{}' offset overflows", entry.name)))?;
    if end > data.len() {
        return Err(ModelError::Truncated);
    }
    Ok(data[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect())
}

pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ModelCheckpoint> {
    if bytes.len() < 4 {
        return Err(ModelError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    if bytes.len() < PREFIX_LEN {
        return Err(ModelError::Truncated);
    }
    let header_len = u64::from_le_bytes(bytes[4..PREFIX_LEN].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or(ModelError::Truncated)?;
    let raw = &bytes[PREFIX_LEN..header_end];

    // Version first, so a future header layout reports the version rather
    // than a parse failure.
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| ModelError::Header(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ModelError::Header("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(value).map_err(|e| ModelError::Header(e.to_string()))?;
    let data = &bytes[header_end..];

    let config = match expected {
        Some(cfg) => cfg.clone(),
        None => header.config.clone(),
    };
    // Shapes first so that a mismatched config names the offending array
    // even when the data section is also short.
    if expected.is_some() {
        config.validate()?;
        for (name, shape) in expected_shapes(&config) {
            if let Some(e) = header.arrays.iter().find(|e| e.name == name) {
                if e.shape != shape {
                    return Err(ModelError::ShapeMismatch {
                        name,
                        expected: shape,
                        found: e.shape.clone(),
                    });
                }
            }
        }
    }
    let mut arrays = BTreeMap::new();
    for e in &header.arrays {
        arrays.insert(e.name.clone(), (e.shape.clone(), read_array(data, e)?));
    }
    let model = Model::from_arrays(config, arrays, header.freeze_mask)?;
    let optimizer = match &header.optimizer {
        Some(opt) => {
            let read_all = |entries: &[ArrayEntry]| -> Result<Vec<Vec<f64>>> {
                if entries.len() != model.params.len() {
                    return Err(ModelError::Header(
                        "optimizer state does not match the parameter list".into(),
                    ));
                }
                entries
                    .iter()
                    .zip(&model.params)
                    .map(|(e, p)| {
                        if e.shape != p.shape {
                            return Err(ModelError::ShapeMismatch {
                                name: e.name.clone(),
                                expected: p.shape.clone(),
                                found: e.shape.clone(),
                            });
                        }
                        read_array(data, e)
                    })
                    .collect()
            };
            Some(OptimizerState {
                step: opt.step,
                m: read_all(&opt.m)?,
                v: read_all(&opt.v)?,
            })
        }
        None => None,
    };
    Ok(ModelCheckpoint {
        format_version: header.format_version,
        model,
        optimizer,
        rng_state: header.rng_state,
        metadata: header.metadata,
    })
}
