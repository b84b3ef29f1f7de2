//! Container format shared by checkpoints and dataset caches:
//!
//! ```text
//! <UTF-8 JSON manifest, one line>\n<raw little-endian f64 payload>
//! ```
//!
//! The manifest lists every array with its name, shape, dtype and its
//! element offset/length into the payload, plus a free-form `meta` object
//! (config echo, seed record, ...). Arrays are stored in manifest order.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

pub const FORMAT: &str = "token-boost/v1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("malformed container: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset in elements from the start of the payload.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> Vec<TensorEntry> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset,
                    len: t.len(),
                };
                offset += t.len();
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            format: FORMAT.into(),
            meta: self.meta.clone(),
            tensors: self.entries(),
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(r: impl Read) -> Result<Self, ContainerError> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line).map_err(|e| io_err("<reader>", e))?;
        if line.last() != Some(&b'\n') {
            return Err(ContainerError::Format("missing manifest terminator".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&line[..line.len() - 1])?;
        if manifest.format != FORMAT {
            return Err(ContainerError::Format(format!("unknown format {:?}", manifest.format)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| io_err("<reader>", e))?;
        if payload.len() % 8 != 0 {
            return Err(ContainerError::Format("payload is not a whole number of f64".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(ContainerError::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let end = e.offset.checked_add(e.len).filter(|&end| end <= values.len());
            let Some(end) = end else {
                return Err(ContainerError::Format(format!("{}: payload out of range", e.name)));
            };
            let t = Tensor::new(e.shape, values[e.offset..end].to_vec())
                .map_err(|err| ContainerError::Format(format!("{}: {err}", e.name)))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }
}

fn io_err(path: &str, source: io::Error) -> ContainerError {
    ContainerError::Io {
        path: path.to_string(),
        source,
    }
}

/// Write atomically (temp file + rename) so an interrupted save never leaves
/// a truncated checkpoint behind.
pub fn write_container(path: &Path, c: &Container) -> Result<(), ContainerError> {
    let p = path.display().to_string();
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&p, e))?;
    f.write_all(&c.to_bytes()).map_err(|e| io_err(&p, e))?;
    f.sync_all().map_err(|e| io_err(&p, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(&p, e))
}

pub fn read_container(path: &Path) -> Result<Container, ContainerError> {
    let f = fs::File::open(path).map_err(|e| io_err(&path.display().to_string(), e))?;
    Container::from_reader(f)
}
