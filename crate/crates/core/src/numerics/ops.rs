use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use super::{Array, Scalar};
use crate::error::{invalid, Error, Result};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables row-parallel matmul. Each output element is still reduced by a
/// single thread in ascending `k`, so results do not depend on this flag.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

// Below this many multiply-adds the rayon dispatch costs more than it saves.
const PARALLEL_MIN_WORK: usize = 1 << 16;

/// `C = A·B` for 2-D arrays.
///
/// Every `C[i, j]` is accumulated from `0` over `t = 0, 1, .., k-1` in that
/// order, matching a naive triple loop bit for bit.
pub fn matmul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    let row_kernel = |i: usize, row: &mut [T]| {
        let arow = &ad[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &bd[t * n..(t + 1) * n];
            for (c, &bv) in row.iter_mut().zip(brow) {
                *c = *c + av * bv;
            }
        }
    };
    if n > 0 && parallel_enabled() && m * n * k >= PARALLEL_MIN_WORK {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_kernel(i, row));
    } else if n > 0 {
        out.chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_kernel(i, row));
    }
    let c = Array::from_parts(vec![m, n], out);
    debug_assert!(!a.is_finite() || !b.is_finite() || c.is_finite());
    Ok(c)
}

/// `A·B + bias` with `bias` broadcast over rows.
pub fn linear<T: Scalar>(x: &Array<T>, w: &Array<T>, bias: Option<&Array<T>>) -> Result<Array<T>> {
    let mut y = matmul(x, w)?;
    if let Some(b) = bias {
        let n = y.row_len();
        if b.len() != n {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                lhs: y.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        for row in y.data_mut().chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v = *v + bb;
            }
        }
    }
    Ok(y)
}

/// Row-wise softmax of a 2-D array with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Array<T>) -> Result<Array<T>> {
    let (_, n) = m.dims2("softmax_rows")?;
    let mut out = m.data().to_vec();
    if n > 0 {
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
    }
    Ok(Array::from_parts(m.shape().to_vec(), out))
}

/// The normaliser is accumulated in `f64`, so for `f32` rows the result barely
/// depends on element order.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += x.as_f64();
    }
    for x in row.iter_mut() {
        *x = T::of(x.as_f64() / sum);
    }
}

/// Concatenates arrays along `axis`; all other axis lengths must agree.
pub fn concat<T: Scalar>(axis: usize, parts: &[&Array<T>]) -> Result<Array<T>> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("concat", "no inputs"))?;
    let ndim = first.ndim();
    if axis >= ndim {
        return Err(invalid("concat", format!("axis {axis} out of range for {ndim}-D")));
    }
    for p in &parts[1..] {
        let compatible = p.ndim() == ndim
            && (0..ndim).all(|ax| ax == axis || p.shape()[ax] == first.shape()[ax]);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Array::from_parts(shape, data))
}

/// Normalises each row to zero mean and unit variance (no affine terms).
pub fn layer_norm<T: Scalar>(x: &Array<T>, eps: f64) -> Array<T> {
    let n = x.row_len();
    let mut out = x.data().to_vec();
    let inv_n = T::of(1.0 / n as f64);
    for row in out.chunks_mut(n.max(1)) {
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_n;
        let var = row
            .iter()
            .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
            * inv_n;
        let inv = T::one() / (var + T::of(eps)).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Array::from_parts(x.shape().to_vec(), out)
}

pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}
