//! Attention kernels for the two-branch topology.
//!
//! All token matrices are `[tokens, model_dim]`; head `h` owns columns
//! `h*d .. (h+1)*d`. Keys and queries are rotated with [`apply_rope`] before
//! scoring, values never are.
//!
//! * [`ref_self_attn`]: reference tokens attend to reference tokens only.
//! * [`tgt_causal_attn`]: target queries attend to `[target; reference]`
//!   keys/values, the reference part taken from a cache.
//! * [`joint_baseline`]: masked attention over the concatenated token set;
//!   with [`Mask::block_causal`] it reproduces the two calls above.
//! * [`cross_attn`]: target queries over an external (unrotated) sequence.

mod cache;

pub use cache::{CacheFingerprint, CacheLayer, CacheSegment, RefCache};

use crate::error::{invalid, Error, Result};
use crate::numerics::{concat, matmul, seeded_normal, softmax_in_place, Array, Rng, Scalar};
use crate::rope::{apply_rope, Coord, RopeConfig};

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet<T> {
    pub w_q: Array<T>,
    pub w_k: Array<T>,
    pub w_v: Array<T>,
    pub w_o: Array<T>,
    heads: usize,
}

impl<T: Scalar> ProjectionSet<T> {
    pub fn new(w_q: Array<T>, w_k: Array<T>, w_v: Array<T>, w_o: Array<T>, heads: usize) -> Result<Self> {
        let dim = w_q.shape().first().copied().unwrap_or(0);
        if heads == 0 || dim == 0 || dim % heads != 0 {
            return Err(invalid(
                "ProjectionSet",
                format!("model dim {dim} is not divisible by {heads} heads"),
            ));
        }
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != [dim, dim] {
                return Err(Error::ShapeMismatch {
                    op: "ProjectionSet",
                    lhs: vec![dim, dim],
                    rhs: w.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
        })
    }

    /// Gaussian weights with std `1/sqrt(dim)`, one stream per matrix.
    pub fn seeded(seed: u64, label: &str, dim: usize, heads: usize) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        let mk = |name: &str| {
            let mut rng = Rng::for_label(seed, &format!("{label}.{name}"));
            seeded_normal::<f64>([dim, dim], &mut rng).scale(std).cast::<T>()
        };
        let (q, k, v, o) = (mk("w_q"), mk("w_k"), mk("w_v"), mk("w_o"));
        Self::new(q, k, v, o, heads)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionSet<U> {
        ProjectionSet {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
            heads: self.heads,
        }
    }

    fn check_rope(&self, rope: &RopeConfig) -> Result<()> {
        if rope.head_dim != self.head_dim() {
            return Err(invalid(
                "attention",
                format!("rope head dim {} but projections use {}", rope.head_dim, self.head_dim()),
            ));
        }
        Ok(())
    }
}

/// Rotated keys and unrotated values of one branch, `[tokens, model_dim]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct KvSegment<T> {
    pub k: Array<T>,
    pub v: Array<T>,
}

impl<T: Scalar> KvSegment<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            k: Array::zeros([0, dim]),
            v: Array::zeros([0, dim]),
        }
    }

    pub fn tokens(&self) -> usize {
        self.k.shape()[0]
    }

    /// Token-wise concatenation of segments, in order.
    pub fn concat(parts: &[&KvSegment<T>]) -> Result<Self> {
        let ks: Vec<_> = parts.iter().map(|p| &p.k).collect();
        let vs: Vec<_> = parts.iter().map(|p| &p.v).collect();
        Ok(Self {
            k: concat(0, &ks)?,
            v: concat(0, &vs)?,
        })
    }
}

/// Which query may attend to which key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self { rows, cols, allowed }
    }

    pub fn permissive(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    /// Mask for tokens ordered `[target; reference]`: target rows see every
    /// key, reference rows see reference keys only.
    pub fn block_causal(n_tgt: usize, n_ref: usize) -> Self {
        let n = n_tgt + n_ref;
        Self::from_fn(n, n, |i, j| i < n_tgt || j >= n_tgt)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::Mask(format!(
                "mask is {}x{}, attention is {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        if let Some(i) = (0..rows).find(|&i| !(0..cols).any(|j| self.allows(i, j))) {
            return Err(Error::Mask(format!("row {i} allows no keys")));
        }
        Ok(())
    }
}

/// Per-head scaled dot-product attention on pre-projected, pre-rotated
/// `q [Nq, D]`, `k [Nk, D]`, `v [Nk, D]`; returns merged heads `[Nq, D]`.
///
/// Masked cells are scored but get zero weight; every value row is still
/// mixed, so the work is dense in `Nq * Nk`.
pub fn attend<T: Scalar>(q: &Array<T>, k: &Array<T>, v: &Array<T>, heads: usize, mask: Option<&Mask>) -> Result<Array<T>> {
    Ok(attend_impl(q, k, v, heads, mask, false)?.0)
}

/// Softmax weights per head, each `[Nq, Nk]`.
pub fn attention_weights<T: Scalar>(q: &Array<T>, k: &Array<T>, heads: usize, mask: Option<&Mask>) -> Result<Vec<Array<T>>> {
    let v = Array::zeros(k.shape().to_vec());
    Ok(attend_impl(q, k, &v, heads, mask, true)?.1)
}

pub(crate) fn attend_impl<T: Scalar>(
    q: &Array<T>,
    k: &Array<T>,
    v: &Array<T>,
    heads: usize,
    mask: Option<&Mask>,
    keep_weights: bool,
) -> Result<(Array<T>, Vec<Array<T>>)> {
    let (nq, dim) = q.dims2("attn")?;
    let (nk, kdim) = k.dims2("attn")?;
    let (nv, vdim) = v.dims2("attn")?;
    if kdim != dim || vdim != dim || nv != nk {
        return Err(invalid(
            "attn",
            format!("q {:?}, k {:?}, v {:?} disagree", q.shape(), k.shape(), v.shape()),
        ));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(invalid("attn", format!("model dim {dim} not divisible by {heads} heads")));
    }
    if nk == 0 && nq > 0 {
        return Err(invalid("attn", "no keys to attend to"));
    }
    if let Some(m) = mask {
        m.validate(nq, nk)?;
    }
    let d = dim / heads;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![T::zero(); nq * dim];
    let mut weights = if keep_weights {
        vec![vec![T::zero(); nq * nk]; heads]
    } else {
        Vec::new()
    };
    let mut row = vec![T::zero(); nk];
    let mut acc = vec![0.0f64; d];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for i in 0..nq {
            let qi = &qd[i * dim..][cols.clone()];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &kd[j * dim..][cols.clone()];
                let dot = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                *s = dot * scale;
            }
            match mask {
                Some(m) if (0..nk).any(|j| !m.allows(i, j)) => masked_softmax(&mut row, |j| m.allows(i, j)),
                _ => softmax_in_place(&mut row),
            }
            // value mixing accumulates in f64 like the softmax normaliser
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, &p) in row.iter().enumerate() {
                let vj = &vd[j * dim..][cols.clone()];
                for (a, &x) in acc.iter_mut().zip(vj) {
                    *a += p.as_f64() * x.as_f64();
                }
            }
            for (o, &a) in out[i * dim..][cols.clone()].iter_mut().zip(&acc) {
                *o = T::of(a);
            }
            if keep_weights {
                weights[h][i * nk..(i + 1) * nk].copy_from_slice(&row);
            }
        }
    }
    let weights = weights
        .into_iter()
        .map(|w| Array::new([nq, nk], w))
        .collect::<Result<Vec<_>>>()?;
    Ok((Array::new([nq, dim], out)?, weights))
}

fn masked_softmax<T: Scalar>(row: &mut [T], allowed: impl Fn(usize) -> bool) {
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .fold(T::neg_infinity(), |m, (_, &x)| m.max(x));
    let mut sum = 0.0f64;
    for (j, x) in row.iter_mut().enumerate() {
        if allowed(j) {
            *x = (*x - max).exp();
            sum += x.as_f64();
        } else {
            *x = T::zero();
        }
    }
    for x in row.iter_mut() {
        *x = T::of(x.as_f64() / sum);
    }
}

/// `softmax(q kᵀ / sqrt(d)) v` per head, merged and projected by `W_O`.
pub fn attn<T: Scalar>(qr: &Array<T>, kr: &Array<T>, v: &Array<T>, proj: &ProjectionSet<T>) -> Result<Array<T>> {
    if qr.row_len() != proj.model_dim() {
        return Err(invalid(
            "attn",
            format!("inputs have width {}, projections {}", qr.row_len(), proj.model_dim()),
        ));
    }
    matmul(&attend(qr, kr, v, proj.heads(), None)?, &proj.w_o)
}

/// Projects and rotates one branch: `(R(x W_Q), R(x W_K), x W_V)`.
pub fn project_branch<T: Scalar>(
    x: &Array<T>,
    coords: &[Coord],
    proj: &ProjectionSet<T>,
    rope: &RopeConfig,
) -> Result<(Array<T>, KvSegment<T>)> {
    proj.check_rope(rope)?;
    let q = apply_rope(&matmul(x, &proj.w_q)?, coords, rope)?;
    let k = apply_rope(&matmul(x, &proj.w_k)?, coords, rope)?;
    let v = matmul(x, &proj.w_v)?;
    Ok((q, KvSegment { k, v }))
}

/// Reference self-attention; also returns the rotated K/V for caching.
pub fn ref_self_attn_kv<T: Scalar>(
    x_ref: &Array<T>,
    ref_coords: &[Coord],
    proj: &ProjectionSet<T>,
    rope: &RopeConfig,
) -> Result<(Array<T>, KvSegment<T>)> {
    let (q, kv) = project_branch(x_ref, ref_coords, proj, rope)?;
    let out = matmul(&attend(&q, &kv.k, &kv.v, proj.heads(), None)?, &proj.w_o)?;
    Ok((out, kv))
}

/// `Attn(R*(Q_ref), R*(K_ref), V_ref)` where `ref_coords` already carry the task bias.
pub fn ref_self_attn<T: Scalar>(
    x_ref: &Array<T>,
    ref_coords: &[Coord],
    proj: &ProjectionSet<T>,
    rope: &RopeConfig,
) -> Result<Array<T>> {
    Ok(ref_self_attn_kv(x_ref, ref_coords, proj, rope)?.0)
}

/// `Attn(R(Q_tgt), [R(K_tgt); R*(K_ref)], [V_tgt; V_ref])`.
pub fn tgt_causal_attn<T: Scalar>(
    x_tgt: &Array<T>,
    tgt_coords: &[Coord],
    reference: &KvSegment<T>,
    proj: &ProjectionSet<T>,
    rope: &RopeConfig,
) -> Result<Array<T>> {
    let dim = proj.model_dim();
    if reference.k.shape() != [reference.tokens(), dim] || reference.v.shape() != reference.k.shape() {
        return Err(Error::CacheMismatch(format!(
            "cached keys {:?} / values {:?} do not fit model dim {dim}",
            reference.k.shape(),
            reference.v.shape()
        )));
    }
    let (q, tgt) = project_branch(x_tgt, tgt_coords, proj, rope)?;
    let kv = KvSegment::concat(&[&tgt, reference])?;
    matmul(&attend(&q, &kv.k, &kv.v, proj.heads(), None)?, &proj.w_o)
}

/// Masked attention over a concatenated token set. `coords_all` must already
/// contain each branch's own positions (reference ones biased).
pub fn joint_baseline<T: Scalar>(
    x_all: &Array<T>,
    coords_all: &[Coord],
    mask: &Mask,
    proj: &ProjectionSet<T>,
    rope: &RopeConfig,
) -> Result<Array<T>> {
    let n = x_all.shape().first().copied().unwrap_or(0);
    mask.validate(n, n)?;
    let (q, kv) = project_branch(x_all, coords_all, proj, rope)?;
    matmul(&attend(&q, &kv.k, &kv.v, proj.heads(), Some(mask))?, &proj.w_o)
}

/// External keys/values `(f W_K, f W_V)` for cross-attention.
pub fn project_external<T: Scalar>(features: &Array<T>, proj: &ProjectionSet<T>) -> Result<KvSegment<T>> {
    Ok(KvSegment {
        k: matmul(features, &proj.w_k)?,
        v: matmul(features, &proj.w_v)?,
    })
}

/// Target queries over an external sequence; nothing is rotated.
pub fn cross_attn<T: Scalar>(x_tgt: &Array<T>, k_ext: &Array<T>, v_ext: &Array<T>, proj: &ProjectionSet<T>) -> Result<Array<T>> {
    let q = matmul(x_tgt, &proj.w_q)?;
    if k_ext.row_len() != proj.model_dim() {
        return Err(invalid(
            "cross_attn",
            format!("external width {} but model dim {}", k_ext.row_len(), proj.model_dim()),
        ));
    }
    matmul(&attend(&q, k_ext, v_ext, proj.heads(), None)?, &proj.w_o)
}
