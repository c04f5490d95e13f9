//! The `SIEV` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SIEV" | u32 version | u64 metadata length | metadata (UTF-8 JSON) | tensors
//! ```
//!
//! The metadata is a JSON object whose `tensors` member is the ordered
//! manifest `[{name, rows, cols}, ...]`; the remaining members are
//! payload-specific. Tensors follow as raw `f64` values in manifest order.
//! Version 1 holds a model, version 2 an adapter cache, version 3 an
//! activation capture.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"SIEV";
pub const VERSION_MODEL: u32 = 1;
pub const VERSION_CACHE: u32 = 2;
pub const VERSION_CAPTURE: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// A decoded container: payload metadata plus named tensors in order.
#[derive(Debug, Clone)]
pub struct Container {
    pub version: u32,
    pub metadata: Map<String, Value>,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn new(version: u32, metadata: Map<String, Value>) -> Self {
        Self {
            version,
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.metadata.clone();
        let manifest: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        meta.insert("tensors".into(), serde_json::to_value(manifest)?);
        let json = serde_json::to_vec(&meta)?;

        let payload: usize = self.tensors.iter().map(|(_, m)| m.as_slice().len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a container, requiring `expected_version`.
    pub fn from_bytes(bytes: &[u8], expected_version: u32) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != expected_version {
            return Err(Error::Format(format!(
                "version mismatch: expected {expected_version}, found {version}"
            )));
        }
        let meta_len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let meta_len = usize::try_from(meta_len)
            .map_err(|_| Error::Format("metadata length overflows".into()))?;
        let json = cur.take(meta_len)?;
        let mut metadata: Map<String, Value> = serde_json::from_slice(json)
            .map_err(|e| Error::Format(format!("metadata is not a JSON object: {e}")))?;
        let manifest: Vec<TensorEntry> = match metadata.remove("tensors") {
            Some(v) => serde_json::from_value(v)
                .map_err(|e| Error::Format(format!("bad tensor manifest: {e}")))?,
            None => return Err(Error::Format("missing tensor manifest".into())),
        };

        let mut tensors = Vec::with_capacity(manifest.len());
        for entry in manifest {
            let count = entry
                .rows
                .checked_mul(entry.cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("tensor {} too large", entry.name)))?;
            let raw = cur.take(count)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((entry.name, Matrix::from_vec(entry.rows, entry.cols, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self {
            version,
            metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, expected_version: u32) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_version)
    }

    /// Deserializes a metadata member.
    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("metadata lacks `{key}`")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Format(format!("metadata `{key}`: {e}")))
    }

    /// Consumes tensors in order, checking names.
    pub fn into_reader(self) -> TensorReader {
        TensorReader {
            inner: self.tensors.into_iter(),
        }
    }
}

pub struct TensorReader {
    inner: std::vec::IntoIter<(String, Matrix)>,
}

impl TensorReader {
    pub fn next(&mut self, name: &str, shape: (usize, usize)) -> Result<Matrix> {
        let (found, m) = self
            .inner
            .next()
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if found != name {
            return Err(Error::Format(format!("expected tensor {name}, found {found}")));
        }
        if m.shape() != shape {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                m.shape()
            )));
        }
        Ok(m)
    }

    pub fn finish(mut self) -> Result<()> {
        match self.inner.next() {
            Some((name, _)) => Err(Error::Format(format!("unexpected tensor {name}"))),
            None => Ok(()),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated payload".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}
