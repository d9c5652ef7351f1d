//! Versioned checkpoint container.
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `MSEGCKPT` |
//! | 4 | format version, `u32` LE |
//! | 8 | header length `n`, `u64` LE |
//! | n | UTF-8 JSON header: `config`, `meta`, `tensors: [{name, shape, offset}]` |
//! | rest | payload, LE `f32`; tensor `i` occupies `offset .. offset + prod(shape)` elements |

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named tensors plus JSON configuration and metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, (shape, data)) in &self.tensors {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!("tensor {name} shape {shape:?} vs {} values", data.len())));
            }
            entries.push(Entry { name: name.clone(), shape: shape.clone(), offset });
            offset += data.len();
        }
        let header =
            serde_json::to_vec(&Header { config: self.config.clone(), meta: self.meta.clone(), tensors: entries })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + n).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + n..];
        if !payload.len().is_multiple_of(4) {
            return Err(Error::Checkpoint("payload is not a whole number of f32".into()));
        }
        let floats: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let len: usize = e.shape.iter().product();
            let data = floats
                .get(e.offset..e.offset + len)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} exceeds payload", e.name)))?
                .to_vec();
            tensors.insert(e.name, (e.shape, data));
        }
        Ok(Self { config: header.config, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
