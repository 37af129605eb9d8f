//! `CSWT0001` weight container.
//!
//! Layout: the 8-byte magic, a little-endian `u64` header length, a UTF-8
//! JSON header `{"entries": [{name, shape, offset}], "metadata": {...}}`, then
//! the raw little-endian `f32` payload. Entry offsets are byte offsets into
//! the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CSWT0001";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    entries: Vec<EntryHeader>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub entries: Vec<(String, Tensor<f32>)>,
    pub metadata: serde_json::Value,
}

impl Default for WeightFile {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            metadata: serde_json::Value::Object(Default::default()),
        }
    }
}

impl WeightFile {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            entries: Vec::new(),
            metadata,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fetches an entry and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Data(format!("weight entry `{name}` missing")))?;
        if t.shape() != shape {
            return Err(Error::Dimension(format!(
                "weight entry `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let e = EntryHeader {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            entries,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::WeightFormat {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing CSWT0001 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| bad(format!("header JSON: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(bad(format!("entry `{}` runs past the payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| bad(err.to_string()))?;
            if !t.is_finite() {
                return Err(bad(format!("entry `{}` holds non-finite values", e.name)));
            }
            entries.push((e.name, t));
        }
        Ok(Self {
            entries,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
