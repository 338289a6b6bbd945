//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u64` header length, a
//! JSON header, then every tensor's values as little-endian `f64` in header
//! order. The header carries the config, its SHA-256, and a SHA-256 of the
//! tensor bytes; both are verified on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LSDACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Kind-specific scalars (step counters, shapes, reports).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub data_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a JSON value's canonical (key-sorted, compact) text.
pub fn json_hash(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        config: serde_json::Value,
        meta: serde_json::Value,
        tensors: BTreeMap<String, Tensor>,
    ) -> Self {
        let entries: Vec<TensorEntry> =
            tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect();
        let header = CheckpointHeader {
            kind: kind.to_string(),
            config_hash: json_hash(&config),
            config,
            meta,
            tensors: entries,
            data_sha256: sha256_hex(&Self::data_bytes(&tensors)),
        };
        Checkpoint { header, tensors }
    }

    fn data_bytes(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
        let mut out = Vec::with_capacity(tensors.values().map(|t| t.numel() * 8).sum());
        for t in tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&Self::data_bytes(&self.tensors));
        Ok(out)
    }

    /// Write through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(corrupt(path, "truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(path, format!("header: {e}")))?;
        if json_hash(&header.config) != header.config_hash {
            return Err(corrupt(path, "config hash does not match the embedded config"));
        }
        let data = &body[hlen..];
        if sha256_hex(data) != header.data_sha256 {
            return Err(corrupt(path, "tensor data hash mismatch"));
        }
        let mut tensors = BTreeMap::new();
        let mut chunks = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let values: Vec<f64> = chunks.by_ref().take(n).collect();
            if values.len() != n {
                return Err(corrupt(path, format!("tensor {} truncated", e.name)));
            }
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
        }
        if chunks.next().is_some() || data.len() % 8 != 0 {
            return Err(corrupt(path, "trailing bytes after tensor data"));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.header.kind)));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Deserialize one field of the meta block.
    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.header.meta.get(key).ok_or_else(|| Error::Checkpoint(format!("missing meta field {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("meta field {key}: {e}")))
    }
}
