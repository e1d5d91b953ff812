//! `TAGI-CKPT v1` container.
//!
//! Layout: magic `"TAGI"`, `u32` LE version (1), `u64` LE header length
//! `H`, `H` bytes of UTF-8 JSON header, then the f64 LE payloads of every
//! tensor back to back in header order. Header offsets are relative to the
//! payload start.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, ParamSet, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TAGI";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<CheckpointEntry>,
}

/// Named tensors plus free-form JSON metadata (config hash, step, ...).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn format_err(msg: impl Into<String>) -> ModelError {
    ModelError::Format(msg.into())
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        let mut t = t.clone();
        t.grad = None;
        t.requires_grad = false;
        self.tensors.push((name.into(), t));
    }

    /// Appends every parameter of `set` under `prefix`.
    pub fn push_params(&mut self, prefix: &str, set: &impl ParamSet) {
        for (name, t) in set.named_params() {
            self.push(super::params::join(prefix, &name), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.names().any(|n| n.starts_with(prefix))
    }

    /// Copies the tensors stored under `prefix` into `set`. Every name and
    /// shape is checked before anything is written, so a failed load leaves
    /// `set` untouched.
    pub fn load_params(&self, prefix: &str, set: &mut impl ParamSet) -> Result<()> {
        let mut params = set.named_params_mut();
        let mut sources = Vec::with_capacity(params.len());
        for (name, t) in &params {
            let full = super::params::join(prefix, name);
            let src = self
                .get(&full)
                .ok_or_else(|| format_err(format!("missing tensor {full}")))?;
            if src.shape() != t.shape() {
                return Err(format_err(format!(
                    "tensor {full}: checkpoint shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            sources.push(src);
        }
        for ((_, t), src) in params.iter_mut().zip(sources) {
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries: Vec<CheckpointEntry> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let length = 8 * t.len() as u64;
                let e = CheckpointEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(format_err("file shorter than the fixed preamble"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(format_err(format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_start = 16u64
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| format_err(format!("header length {hlen} runs past end of file")))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| format_err(format!("header JSON: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(format_err(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(format_err(format!(
                    "tensor {}: offset {} but previous tensor ends at {expected_offset}",
                    e.name, e.offset
                )));
            }
            let elems: usize = e.shape.iter().product();
            if e.shape.is_empty() || e.shape.contains(&0) || e.length != 8 * elems as u64 {
                return Err(format_err(format!(
                    "tensor {}: shape {:?} disagrees with byte length {}",
                    e.name, e.shape, e.length
                )));
            }
            let end = e.offset + e.length;
            if end > payload.len() as u64 {
                return Err(format_err(format!(
                    "tensor {}: payload truncated ({} of {end} bytes present)",
                    e.name,
                    payload.len()
                )));
            }
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| format_err(format!("tensor {}: {err}", e.name)))?;
            tensors.push((e.name.clone(), t));
            expected_offset = end;
        }
        if expected_offset != payload.len() as u64 {
            return Err(format_err(format!(
                "payload has {} bytes, header accounts for {expected_offset}",
                payload.len()
            )));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
