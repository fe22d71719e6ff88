//! Binary model files.
//!
//! Layout: the magic bytes `MTLCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every tensor as little-endian `f32` values in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::heads::TaskSpec;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MTLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated header: {0} bytes")]
    TruncatedHeader(usize),
    #[error("truncated manifest: header announces {expected} bytes, {actual} present")]
    TruncatedManifest { expected: u64, actual: usize },
    #[error("unreadable manifest: {0}")]
    Manifest(String),
    #[error("truncated payload: manifest describes {expected} bytes, file holds {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("payload size mismatch: manifest describes {expected} bytes, file holds {actual}")]
    PayloadSize { expected: usize, actual: usize },
    #[error("tensor table does not tile the payload: {0}")]
    Layout(String),
    #[error("tensor {0} holds non-finite values")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub tasks: Vec<TaskSpec>,
    pub seeds: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

/// Serializes `model`; values are stored at 32-bit precision.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        encoder: model.encoder.clone(),
        tasks: model.tasks.clone(),
        seeds: model.seeds.clone(),
        tensors,
        payload_bytes: offset,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses the manifest alone, checking the header.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::TruncatedHeader(bytes.len()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let available = bytes.len() - HEADER_LEN;
    if len > available as u64 {
        return Err(CheckpointError::TruncatedManifest {
            expected: len,
            actual: available,
        });
    }
    let end = HEADER_LEN + len as usize;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER_LEN..end]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != version {
        return Err(CheckpointError::Manifest(format!(
            "manifest claims version {} inside a version {version} file",
            manifest.format_version
        )));
    }
    Ok((manifest, end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let (manifest, start) = read_manifest(bytes)?;
    let payload = &bytes[start..];
    let mut expected = 0;
    for e in &manifest.tensors {
        if e.offset != expected {
            return Err(CheckpointError::Layout(format!(
                "{} starts at byte {}, expected {expected}",
                e.name, e.offset
            )));
        }
        expected += 4 * e.shape.iter().product::<usize>();
    }
    if expected != manifest.payload_bytes {
        return Err(CheckpointError::Layout(format!(
            "tensors cover {expected} bytes, manifest declares {}",
            manifest.payload_bytes
        )));
    }
    if payload.len() < expected {
        return Err(CheckpointError::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(CheckpointError::PayloadSize {
            expected,
            actual: payload.len(),
        });
    }
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data: Vec<f64> = payload[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(e.name.clone()));
        }
        if params.contains(&e.name) {
            return Err(CheckpointError::Layout(format!("tensor {} listed twice", e.name)));
        }
        let t = Tensor::new(e.shape.clone(), data).expect("length follows shape");
        params.insert(e.name.clone(), t);
    }
    Ok(Model {
        encoder: manifest.encoder,
        tasks: manifest.tasks,
        params,
        seeds: manifest.seeds,
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
