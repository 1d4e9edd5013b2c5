//! 3D rotary position embedding and the task-dependent reference offset.
//!
//! The `d/2` rotary pairs of each head are split into a temporal, a height
//! and a width group. Pair `j` of the group for axis `a` (with `P_a` pairs)
//! rotates by `pos_a * base^(-j / P_a)`. Pairs are interleaved: pair `p`
//! covers elements `2p` and `2p + 1` of the head.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::latents::{TaskCategory, TaskSpec};
use crate::numerics::{Array, Scalar};

/// Token coordinate in (frame, height, width) order.
pub type Coord = [i64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPartition {
    pub temporal: usize,
    pub height: usize,
    pub width: usize,
}

impl PairPartition {
    /// Equal thirds of `pairs`, remainder to the temporal axis.
    pub fn balanced(pairs: usize) -> Self {
        let third = pairs / 3;
        Self {
            temporal: pairs - 2 * third,
            height: third,
            width: third,
        }
    }

    pub fn total(&self) -> usize {
        self.temporal + self.height + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub partition: PairPartition,
    pub base: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Result<Self> {
        Self::with_partition(head_dim, PairPartition::balanced(head_dim / 2), 10_000.0)
    }

    pub fn with_partition(head_dim: usize, partition: PairPartition, base: f64) -> Result<Self> {
        let cfg = Self {
            head_dim,
            partition,
            base,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(invalid("rope", format!("head dim {} must be even and positive", self.head_dim)));
        }
        if self.partition.total() != self.head_dim / 2 {
            return Err(invalid(
                "rope",
                format!(
                    "partition {:?} covers {} pairs, head dim {} has {}",
                    self.partition,
                    self.partition.total(),
                    self.head_dim,
                    self.head_dim / 2
                ),
            ));
        }
        if !(self.base.is_finite() && self.base > 0.0) {
            return Err(invalid("rope", format!("base {} must be positive", self.base)));
        }
        Ok(())
    }

    /// `(axis, frequency)` for every pair of a head; axis 0/1/2 = frame/height/width.
    pub fn pair_frequencies(&self) -> Vec<(usize, f64)> {
        let p = &self.partition;
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (axis, count) in [(0, p.temporal), (1, p.height), (2, p.width)] {
            for j in 0..count {
                out.push((axis, self.base.powf(-(j as f64) / count as f64)));
            }
        }
        out
    }
}

/// Offsets added to reference token coordinates, `Δ = (Δ_T, Δ_W, Δ_H)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PositionBias {
    pub temporal: i64,
    pub width: i64,
    /// Present for completeness; no task sets it.
    pub height: i64,
}

impl PositionBias {
    pub const ZERO: PositionBias = PositionBias {
        temporal: 0,
        width: 0,
        height: 0,
    };

    /// `(Δ_T, Δ_W, Δ_H)`.
    pub fn triple(&self) -> [i64; 3] {
        [self.temporal, self.width, self.height]
    }

    pub fn apply(&self, c: Coord) -> Coord {
        [c[0] + self.temporal, c[1] + self.height, c[2] + self.width]
    }
}

/// Temporal tasks shift the reference right by the target width;
/// appearance tasks shift it after the target's last frame.
pub fn task_bias(task: &TaskSpec, f_tgt: usize, w_tgt: usize) -> PositionBias {
    match task.category {
        TaskCategory::Temporal => PositionBias {
            width: w_tgt as i64,
            ..PositionBias::ZERO
        },
        TaskCategory::Appearance => PositionBias {
            temporal: f_tgt as i64,
            ..PositionBias::ZERO
        },
    }
}

/// Coordinates of an `f x h x w` token grid, row-major over (frame, height, width).
pub fn position_grid(f: usize, h: usize, w: usize, bias: PositionBias) -> Vec<Coord> {
    let mut out = Vec::with_capacity(f * h * w);
    for t in 0..f as i64 {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                out.push(bias.apply([t, y, x]));
            }
        }
    }
    out
}

/// Rotates every head of every token by its coordinate.
///
/// `x` is `[tokens, ...]` whose per-token size is a multiple of `head_dim`
/// (e.g. `[tokens, heads, d]` or `[tokens, heads * d]`).
pub fn apply_rope<T: Scalar>(x: &Array<T>, coords: &[Coord], cfg: &RopeConfig) -> Result<Array<T>> {
    rotate(x, coords, cfg, 1.0)
}

/// Adjoint of [`apply_rope`]: rotation by the negated angles.
pub fn apply_rope_transpose<T: Scalar>(x: &Array<T>, coords: &[Coord], cfg: &RopeConfig) -> Result<Array<T>> {
    rotate(x, coords, cfg, -1.0)
}

fn rotate<T: Scalar>(x: &Array<T>, coords: &[Coord], cfg: &RopeConfig, sign: f64) -> Result<Array<T>> {
    cfg.validate()?;
    let tokens = x.shape().first().copied().unwrap_or(0);
    if tokens != coords.len() {
        return Err(invalid("apply_rope", format!("{} coordinates for {tokens} tokens", coords.len())));
    }
    let per_token = x.len().checked_div(tokens).unwrap_or(0);
    let d = cfg.head_dim;
    if per_token % d != 0 {
        return Err(invalid(
            "apply_rope",
            format!("per-token width {per_token} is not a multiple of head dim {d}"),
        ));
    }
    let freqs = cfg.pair_frequencies();
    let mut out = x.data().to_vec();
    let mut table = vec![(T::zero(), T::zero()); freqs.len()];
    for (tok, coord) in coords.iter().enumerate() {
        for (slot, &(axis, freq)) in table.iter_mut().zip(&freqs) {
            let angle = sign * coord[axis] as f64 * freq;
            *slot = (T::of(angle.cos()), T::of(angle.sin()));
        }
        let row = &mut out[tok * per_token..(tok + 1) * per_token];
        for head in row.chunks_mut(d) {
            for (pair, &(c, s)) in head.chunks_mut(2).zip(&table) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
    Array::new(x.shape().to_vec(), out)
}
