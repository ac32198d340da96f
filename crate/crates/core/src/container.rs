//! Manifest-plus-blob storage shared by checkpoints and dataset artifacts.
//!
//! The manifest is JSON listing each array's name, dtype, shape, byte offset
//! and byte length; the blob holds the little-endian arrays back to back in
//! manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Real};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::U32(_) => Dtype::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Wraps a real-valued buffer under its own dtype.
    pub fn from_real<T: Real>(data: Vec<T>) -> Self {
        match T::DTYPE {
            Dtype::F32 => ArrayData::F32(data.iter().map(|v| v.f64() as f32).collect()),
            _ => ArrayData::F64(data.iter().map(|v| v.f64()).collect()),
        }
    }

    /// Real-valued view; requires the stored dtype to equal `T::DTYPE`, so no
    /// silent precision change happens.
    pub fn to_real<T: Real>(&self) -> Result<Vec<T>> {
        match (self, T::DTYPE) {
            (ArrayData::F32(v), Dtype::F32) => Ok(v.iter().map(|&x| T::of(x as f64)).collect()),
            (ArrayData::F64(v), Dtype::F64) => Ok(v.iter().map(|&x| T::of(x)).collect()),
            (other, want) => Err(Error::Data(format!(
                "array stored as {:?} but {:?} was requested",
                other.dtype(),
                want
            ))),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            Dtype::F64 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
            Dtype::U32 => ArrayData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
    len_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    kind: String,
    meta: serde_json::Value,
    entries: Vec<Entry>,
    blob_len: usize,
    blob_sha256: String,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Container {
    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Data(format!("container of kind {:?} has no array {name:?}", self.kind)))
    }

    /// Returns the pretty-printed manifest and the blob.
    pub fn encode(&self) -> Result<(String, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let n: usize = a.shape.iter().product();
            if n != a.data.len() {
                return Err(Error::shape("container entry", &a.shape, &[a.data.len()]));
            }
            let offset = blob.len();
            a.data.write_le(&mut blob);
            entries.push(Entry {
                name: a.name.clone(),
                dtype: a.data.dtype(),
                shape: a.shape.clone(),
                offset,
                len_bytes: blob.len() - offset,
            });
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            entries,
            blob_len: blob.len(),
            blob_sha256: sha256_hex(&blob),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        Ok((text, blob))
    }

    /// Parses untrusted input; every inconsistency is a format error and no
    /// input can panic.
    pub fn decode(manifest: &str, blob: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_str(manifest)
            .map_err(|e| format_err(0, format!("manifest is not valid: {e}")))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(format_err(0, format!("unsupported schema version {}", m.schema_version)));
        }
        if m.blob_len != blob.len() {
            return Err(format_err(
                blob.len().min(m.blob_len),
                format!("blob has {} bytes, manifest says {}", blob.len(), m.blob_len),
            ));
        }
        if sha256_hex(blob) != m.blob_sha256 {
            return Err(format_err(0, "blob digest does not match manifest"));
        }
        let mut expected_offset = 0usize;
        let mut arrays = Vec::with_capacity(m.entries.len());
        for e in m.entries {
            if e.offset != expected_offset {
                return Err(format_err(
                    e.offset,
                    format!("entry {:?} starts at {}, expected {expected_offset}", e.name, e.offset),
                ));
            }
            let want = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(e.dtype.size_of()))
                .ok_or_else(|| format_err(e.offset, format!("entry {:?} shape overflows", e.name)))?;
            if want != e.len_bytes {
                return Err(format_err(
                    e.offset,
                    format!("entry {:?} has {} bytes but its shape needs {want}", e.name, e.len_bytes),
                ));
            }
            let end = e
                .offset
                .checked_add(e.len_bytes)
                .filter(|&end| end <= blob.len())
                .ok_or_else(|| format_err(e.offset, format!("entry {:?} runs past the blob", e.name)))?;
            if arrays.iter().any(|a: &NamedArray| a.name == e.name) {
                return Err(format_err(e.offset, format!("duplicate entry {:?}", e.name)));
            }
            arrays.push(NamedArray {
                data: ArrayData::read_le(e.dtype, &blob[e.offset..end]),
                name: e.name,
                shape: e.shape,
            });
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(format_err(expected_offset, "trailing bytes after the last entry"));
        }
        Ok(Container {
            kind: m.kind,
            meta: m.meta,
            arrays,
        })
    }

    pub fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
    }

    /// Writes `<stem>.json` and `<stem>.bin`; returns the blob digest.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<String> {
        let (text, blob) = self.encode()?;
        std::fs::create_dir_all(dir)?;
        let (mp, bp) = Self::paths(dir, stem);
        std::fs::write(&bp, &blob)?;
        std::fs::write(&mp, text)?;
        Ok(sha256_hex(&blob))
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        Self::read_with_digest(dir, stem).map(|(c, _)| c)
    }

    /// Like [`Container::read`], also returning the blob digest.
    pub fn read_with_digest(dir: &Path, stem: &str) -> Result<(Self, String)> {
        let (mp, bp) = Self::paths(dir, stem);
        for p in [&mp, &bp] {
            if !p.exists() {
                return Err(Error::Data(format!("missing artifact {}", p.display())));
            }
        }
        let text = std::fs::read_to_string(&mp)?;
        let blob = std::fs::read(&bp)?;
        Ok((Self::decode(&text, &blob)?, sha256_hex(&blob)))
    }
}
