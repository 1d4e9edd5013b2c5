use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::KvSegment;
use crate::error::{Error, Result};
use crate::latents::TaskKind;
use crate::numerics::{concat, Array, Scalar};
use crate::rope::PositionBias;

/// One reference task's contribution to a cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSegment {
    pub task: TaskKind,
    pub bias: PositionBias,
    /// Reference latent grid `(f, h, w)`.
    pub grid: [usize; 3],
}

impl CacheSegment {
    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }
}

/// Identifies the weights, tasks, offsets and shapes a cache was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheFingerprint {
    /// Digest of the model configuration (including its weight seed).
    pub model: u64,
    pub digest: u64,
}

impl CacheFingerprint {
    pub fn compute(model: u64, segments: &[CacheSegment], target_extent: [usize; 2], dtype: &str) -> Self {
        let mut h = Sha256::new();
        h.update(model.to_le_bytes());
        h.update(dtype.as_bytes());
        for s in segments {
            h.update(s.task.name().as_bytes());
            for b in s.bias.triple() {
                h.update(b.to_le_bytes());
            }
            for g in s.grid {
                h.update((g as u64).to_le_bytes());
            }
        }
        for e in target_extent {
            h.update((e as u64).to_le_bytes());
        }
        let digest = h.finalize();
        Self {
            model,
            digest: u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")),
        }
    }
}

/// Per-layer reference state recorded by the single t = 0 reference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheLayer<T> {
    /// Keys already rotated with the reference offset, and values.
    pub kv: KvSegment<T>,
    /// Reference hidden states leaving this layer.
    pub hidden: Array<T>,
}

/// Time-invariant reference keys/values for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RefCache<T> {
    pub layers: Vec<CacheLayer<T>>,
    pub segments: Vec<CacheSegment>,
    /// Target `(frames, width)` the offsets were derived from.
    pub target_extent: [usize; 2],
    pub fingerprint: CacheFingerprint,
}

impl<T: Scalar> RefCache<T> {
    pub fn tokens(&self) -> usize {
        self.segments.iter().map(CacheSegment::tokens).sum()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Concatenates caches token-wise, layer by layer, in the given order.
    pub fn concat(parts: &[&RefCache<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::CacheMismatch("nothing to concatenate".into()))?;
        for p in &parts[1..] {
            if p.fingerprint.model != first.fingerprint.model
                || p.layers.len() != first.layers.len()
                || p.target_extent != first.target_extent
            {
                return Err(Error::CacheMismatch(
                    "caches were built for different models or targets".into(),
                ));
            }
        }
        let mut layers = Vec::with_capacity(first.layers.len());
        for l in 0..first.layers.len() {
            let kvs: Vec<_> = parts.iter().map(|p| &p.layers[l].kv).collect();
            let hs: Vec<_> = parts.iter().map(|p| &p.layers[l].hidden).collect();
            layers.push(CacheLayer {
                kv: KvSegment::concat(&kvs)?,
                hidden: concat(0, &hs)?,
            });
        }
        let segments: Vec<_> = parts.iter().flat_map(|p| p.segments.iter().copied()).collect();
        let fingerprint = CacheFingerprint::compute(
            first.fingerprint.model,
            &segments,
            first.target_extent,
            &T::DTYPE.to_string(),
        );
        Ok(Self {
            layers,
            segments,
            target_extent: first.target_extent,
            fingerprint,
        })
    }

    /// Canonical byte image: fingerprint, then per layer K, V and hidden payloads.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.fingerprint.model.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.digest.to_le_bytes());
        for layer in &self.layers {
            for a in [&layer.kv.k, &layer.kv.v, &layer.hidden] {
                for &d in a.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                out.extend_from_slice(&a.to_le_bytes());
            }
        }
        out
    }
}
