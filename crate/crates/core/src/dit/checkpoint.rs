//! Self-describing weight checkpoint.
//!
//! Layout, little-endian:
//!
//! | size | field                                |
//! |------|--------------------------------------|
//! | 4    | magic `OXCK`                         |
//! | 4    | version (u32)                        |
//! | 8    | manifest length in bytes (u64)       |
//! | ..   | JSON manifest ([`Checkpoint`])       |
//! | ..   | tensor payloads at manifest offsets  |
//!
//! Offsets are relative to the start of the payload section.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DitConfig, DitModel, Init};
use crate::error::{Error, Result};
use crate::numerics::{Array, DType, Scalar};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OXCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

/// Manifest of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: DitConfig,
    pub tensors: Vec<TensorEntry>,
}

impl<T: Scalar> DitModel<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, a) in self.named_tensors() {
            let bytes = a.to_le_bytes();
            tensors.push(TensorEntry {
                name,
                shape: a.shape().to_vec(),
                dtype: T::DTYPE,
                offset: payload.len() as u64,
                nbytes: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        }
        let manifest = serde_json::to_vec(&Checkpoint {
            config: self.cfg.clone(),
            tensors,
        })
        .expect("manifest serialises");
        let mut out = Vec::with_capacity(PREFIX_LEN + manifest.len() + payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out
    }

    /// Loads weights stored in either precision, converting to `T`.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = split(bytes)?;
        let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
        for e in &manifest.tensors {
            if by_name.insert(e.name.as_str(), e).is_some() {
                return Err(Error::Format(format!("tensor {} listed twice", e.name)));
            }
        }
        let mut used = 0usize;
        let model = Self::build(manifest.config.clone(), |name, shape, _init: Init| {
            let e = by_name
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if e.shape != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, model expects {shape:?}",
                    e.shape
                )));
            }
            let start = usize::try_from(e.offset).map_err(|_| Error::Format("offset overflow".into()))?;
            let end = start
                .checked_add(e.nbytes as usize)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Format(format!("tensor {name} runs past the payload")))?;
            used += 1;
            let raw = &payload[start..end];
            Ok(match e.dtype {
                DType::F32 => Array::<f32>::from_le_bytes(shape.to_vec(), raw)?.cast(),
                DType::F64 => Array::<f64>::from_le_bytes(shape.to_vec(), raw)?.cast(),
            })
        })?;
        if used != manifest.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model uses {used}",
                manifest.tensors.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

/// Parses only the manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<Checkpoint> {
    Ok(split(bytes)?.0)
}

fn split(bytes: &[u8]) -> Result<(Checkpoint, &[u8])> {
    if bytes.len() < PREFIX_LEN {
        return Err(Error::Format("checkpoint shorter than its prefix".into()));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = PREFIX_LEN
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("manifest runs past the file".into()))?;
    let manifest: Checkpoint = serde_json::from_slice(&bytes[PREFIX_LEN..end])?;
    Ok((manifest, &bytes[end..]))
}
