//! Checkpoints and their on-disk format.
//!
//! Layout: the magic `MCKP1\n`, a little-endian `u32` header length, a UTF-8
//! JSON header, then the raw little-endian `f32` blobs of every parameter in
//! lexicographic name order. Blob offsets in the header are relative to the
//! first byte after the header.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::{self, ParamError, ParameterMap, LORA_A, LORA_B, TEXT_TAG};
use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 6] = b"MCKP1\n";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("truncated checkpoint: need {needed} bytes, only {available} available")]
    Truncated { needed: u64, available: u64 },
    #[error("header/blob length mismatch: {0}")]
    LengthMismatch(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u64),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// LoRA adapter configuration shared by every adapter pair of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub r: usize,
    pub alpha: f64,
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        crate::tensor::adapter_scale(self.r, self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub base_id: String,
    pub modalities: BTreeSet<String>,
    pub decoupled: bool,
    pub adapter: Option<AdapterConfig>,
    pub params: ParameterMap,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Header {
    pub version: u64,
    pub base_id: String,
    pub modalities: Vec<String>,
    pub decoupled: bool,
    pub adapter: Option<AdapterConfig>,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

/// SHA-256 over the names, shapes and bytes of the selected parameters, in name order.
pub fn content_hash<'a>(params: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in params {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((t.shape().len() as u64).to_le_bytes());
        for d in t.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        hasher.update(t.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    /// Checks the naming and adapter invariants.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        let invalid = |msg: String| Err(CheckpointError::Invalid(msg));
        for m in &self.modalities {
            if m == TEXT_TAG || !params::is_valid_name(m) || m.contains('.') {
                return invalid(format!("invalid modality tag {m:?}"));
            }
        }
        for (name, tensor) in &self.params {
            let is_adapter = params::adapter_base(name).is_some();
            if is_adapter && self.adapter.is_none() {
                return invalid(format!("{name} present without an adapter config"));
            }
            if params::is_block_linear(name) {
                match (self.decoupled, params::weight_tag(name)) {
                    (true, None) => {
                        return invalid(format!("decoupled checkpoint has untagged weight {name}"))
                    }
                    (true, Some(tag)) if tag != TEXT_TAG && !self.modalities.contains(tag) => {
                        return invalid(format!("{name} routes unknown modality {tag:?}"))
                    }
                    (false, Some(_)) => {
                        return invalid(format!("coupled checkpoint has tagged weight {name}"))
                    }
                    _ => {}
                }
            }
            if let (Some(cfg), Some(base)) = (self.adapter, name.strip_suffix(LORA_A)) {
                let b_name = format!("{base}{LORA_B}");
                let (Some(base_t), Some(b)) = (self.params.get(base), self.params.get(&b_name))
                else {
                    return invalid(format!("adapter {name} lacks its base weight or lora_b"));
                };
                let Some((d_out, d_in)) = base_t.dims2() else {
                    return invalid(format!("adapter base {base} is not 2-D"));
                };
                if tensor.shape() != [cfg.r, d_in] || b.shape() != [d_out, cfg.r] {
                    return invalid(format!(
                        "adapter shapes for {base}: lora_a {:?}, lora_b {:?}, expected ({}, {d_in}) and ({d_out}, {})",
                        tensor.shape(),
                        b.shape(),
                        cfg.r,
                        cfg.r
                    ));
                }
            }
            if let Some(base) = name.strip_suffix(LORA_B) {
                if !self.params.contains(&format!("{base}{LORA_A}")) {
                    return invalid(format!("{name} has no matching lora_a"));
                }
            }
        }
        if let Some(cfg) = self.adapter {
            if cfg.r == 0 || !(cfg.alpha.is_finite() && cfg.alpha > 0.0) {
                return invalid(format!("adapter config {cfg:?} must have r >= 1 and alpha > 0"));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> Header {
        let mut offset = 0u64;
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                let nbytes = 4 * t.len() as u64;
                let entry = ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".to_string(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                entry
            })
            .collect();
        Header {
            version: FORMAT_VERSION,
            base_id: self.base_id.clone(),
            modalities: self.modalities.iter().cloned().collect(),
            decoupled: self.decoupled,
            adapter: self.adapter,
            params,
        }
    }

    /// Serializes to the checkpoint byte format.
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header())
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| CheckpointError::Header("header exceeds 4 GiB".into()))?;
        let blob_len: usize = self.params.iter().map(|(_, t)| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + blob_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses the checkpoint byte format; nothing is returned unless the whole file validates.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let header = parse_header(bytes)?;
        let blob = &bytes[MAGIC.len() + 4 + header_len(bytes)?..];
        let declared: u64 = header.params.iter().map(|p| p.nbytes).sum();
        let mut params = ParameterMap::new();
        let mut prev: Option<&str> = None;
        for entry in &header.params {
            if entry.dtype != "f32" {
                return Err(CheckpointError::UnsupportedDtype(entry.dtype.clone()));
            }
            if prev.is_some_and(|p| p >= entry.name.as_str()) {
                return Err(CheckpointError::Header(format!(
                    "parameters not in strict lexicographic order at {:?}",
                    entry.name
                )));
            }
            prev = Some(&entry.name);
            let elems: usize = entry.shape.iter().product();
            if entry.nbytes != 4 * elems as u64 {
                return Err(CheckpointError::LengthMismatch(format!(
                    "{} declares {} bytes for shape {:?}",
                    entry.name, entry.nbytes, entry.shape
                )));
            }
            let end = entry.offset.checked_add(entry.nbytes).ok_or_else(|| {
                CheckpointError::LengthMismatch(format!("{} offset overflows", entry.name))
            })?;
            if end > blob.len() as u64 {
                return Err(CheckpointError::Truncated {
                    needed: end,
                    available: blob.len() as u64,
                });
            }
            let raw = &blob[entry.offset as usize..end as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        }
        if declared != blob.len() as u64 {
            return Err(CheckpointError::LengthMismatch(format!(
                "header declares {declared} blob bytes, file holds {}",
                blob.len()
            )));
        }
        let ckpt = Checkpoint {
            base_id: header.base_id,
            modalities: header.modalities.into_iter().collect(),
            decoupled: header.decoupled,
            adapter: header.adapter,
            params,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn header_len(bytes: &[u8]) -> Result<usize, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len_bytes = bytes.get(MAGIC.len()..MAGIC.len() + 4).ok_or(CheckpointError::Truncated {
        needed: MAGIC.len() as u64 + 4,
        available: bytes.len() as u64,
    })?;
    let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let needed = MAGIC.len() + 4 + len;
    if needed > bytes.len() {
        return Err(CheckpointError::Truncated {
            needed: needed as u64,
            available: bytes.len() as u64,
        });
    }
    Ok(len)
}

/// Reads and version-checks the JSON header of a checkpoint image.
pub fn parse_header(bytes: &[u8]) -> Result<Header, CheckpointError> {
    let len = header_len(bytes)?;
    let raw = &bytes[MAGIC.len() + 4..MAGIC.len() + 4 + len];
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Header("missing version".into()))?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}
