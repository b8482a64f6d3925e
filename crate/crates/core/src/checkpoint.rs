//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "INPCKPT\0"
//! version  u32       FORMAT_VERSION
//! hlen     u64       length of the JSON header in bytes
//! header   hlen      UTF-8 JSON: config echo, seed, step, counters and,
//!                    per section, the ordered list of (tensor name, shape)
//! payload            every tensor's f64 values (LE), in header order
//! ```
//!
//! Sections are named (`generator`, `generator.adam.m`, `detector`, ...).
//! Serialization is deterministic, so save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;

pub const MAGIC: &[u8; 8] = b"INPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    seed: u64,
    step: u64,
    counters: BTreeMap<String, u64>,
    sections: Vec<SectionEntry>,
}

/// A named group of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<Param>,
}

/// In-memory form of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Echo of the configuration the state was produced with.
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub counters: BTreeMap<String, u64>,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn take_section(&mut self, name: &str) -> Result<Vec<Param>> {
        let idx = self
            .sections
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))?;
        Ok(self.sections.remove(idx).tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            counters: self.counters.clone(),
            sections: self
                .sections
                .iter()
                .map(|s| SectionEntry {
                    name: s.name.clone(),
                    tensors: s
                        .tensors
                        .iter()
                        .map(|t| TensorEntry {
                            name: t.name.clone(),
                            shape: t.shape.clone(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n_values: usize = self
            .sections
            .iter()
            .flat_map(|s| &s.tensors)
            .map(|t| t.data.len())
            .sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.sections.iter().flat_map(|s| &s.tensors) {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!("tensor {} has inconsistent shape", t.name)));
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut payload = body[hlen..].chunks_exact(8);
        let mut sections = Vec::with_capacity(header.sections.len());
        for s in header.sections {
            let mut tensors = Vec::with_capacity(s.tensors.len());
            for t in s.tensors {
                let n: usize = t.shape.iter().product();
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    let chunk = payload.next().ok_or_else(|| bad("truncated payload"))?;
                    data.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
                }
                tensors.push(Param {
                    name: t.name,
                    shape: t.shape,
                    data,
                });
            }
            sections.push(Section { name: s.name, tensors });
        }
        if payload.next().is_some() || !payload.remainder().is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint {
            config: header.config,
            seed: header.seed,
            step: header.step,
            counters: header.counters,
            sections,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
