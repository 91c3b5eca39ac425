//! Checkpoint container shared by dense and hybrid models.
//!
//! Layout:
//!
//! ```text
//! b"HMOECKPT"                 8-byte magic
//! u64 LE                      header length in bytes
//! header                      UTF-8 JSON: config fields + tensor manifest
//! payload                     little-endian f64 tensors, back to back
//! ```
//!
//! Each manifest entry is `{name, shape, offset, trainable}` with `offset`
//! in bytes from the start of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dense::DenseConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Parameter, Tensor};
use crate::segment_moe::SegmentMoEConfig;
use crate::token_moe::{GatingMode, TokenMoEConfig};

pub const MAGIC: &[u8; 8] = b"HMOECKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Hybrid layer layout stored alongside the dense config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub token: TokenMoEConfig,
    pub segment: SegmentMoEConfig,
    pub gating: GatingMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dense: DenseConfig,
    /// `None` for a plain dense model.
    pub moe: Option<MoeConfig>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    dense: DenseConfig,
    moe: Option<MoeConfig>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
}

impl Checkpoint {
    pub fn dense(dense: DenseConfig, params: ParamStore) -> Self {
        Checkpoint {
            dense,
            moe: None,
            step: 0,
            params,
        }
    }

    pub fn is_hybrid(&self) -> bool {
        self.moe.is_some()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|p| {
                let e = ManifestEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    trainable: p.trainable,
                };
                offset += 8 * p.value.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            step: self.step,
            dense: self.dense.clone(),
            moe: self.moe.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header runs past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let payload = &bytes[header_end..];
        let mut params = ParamStore::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` truncated", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(Parameter::new(e.name, Tensor::new(e.shape, data)?, e.trainable));
        }
        let ckpt = Checkpoint {
            dense: header.dense,
            moe: header.moe,
            step: header.step,
            params,
        };
        ckpt.dense.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
