//! Analytic backward pass of rotary attention, checked against central differences.
//!
//! The forward here is a deliberately separate, loop-level implementation in
//! `f64` that keeps its intermediates. Finite differences are taken on the
//! production functions in [`crate::attention`], so agreement ties the two
//! together.

use serde::{Deserialize, Serialize};

use crate::attention::{project_branch, ref_self_attn, tgt_causal_attn, KvSegment, ProjectionSet};
use crate::error::{invalid, Error, Result};
use crate::numerics::{matmul, Array};
use crate::rope::{apply_rope, apply_rope_transpose, Coord, RopeConfig};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Entries whose magnitude is below this are excluded from the relative error.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

/// Which branch's attention is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnPath {
    /// Target queries over `[target; reference]` keys.
    Target,
    /// Reference queries over reference keys only.
    Reference,
}

#[derive(Debug, Clone)]
pub struct AttnProblem {
    pub x_tgt: Array<f64>,
    pub x_ref: Array<f64>,
    pub coords_tgt: Vec<Coord>,
    /// Already carrying the task bias.
    pub coords_ref: Vec<Coord>,
    pub proj: ProjectionSet<f64>,
    pub rope: RopeConfig,
}

/// Forward intermediates. `weights` and `mixed` are dropped by [`SavedForward::discard`].
#[derive(Debug, Clone)]
pub struct SavedForward {
    pub path: AttnPath,
    pub n_tgt: usize,
    pub x_q: Array<f64>,
    pub x_kv: Array<f64>,
    pub coords_q: Vec<Coord>,
    pub coords_kv: Vec<Coord>,
    pub q_rot: Array<f64>,
    pub k_rot: Array<f64>,
    pub v: Array<f64>,
    /// Softmax weights per head, `[n_q, n_kv]`.
    pub weights: Option<Vec<Array<f64>>>,
    /// Concatenated head outputs before `W_O`.
    pub mixed: Option<Array<f64>>,
    pub output: Array<f64>,
}

impl SavedForward {
    pub fn discard(mut self) -> Self {
        self.weights = None;
        self.mixed = None;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    /// Gradients w.r.t. the unrotated projections `X W_Q`, `X W_K`, `X W_V`.
    pub q: Array<f64>,
    pub k: Array<f64>,
    pub v: Array<f64>,
    pub w_q: Array<f64>,
    pub w_k: Array<f64>,
    pub w_v: Array<f64>,
    pub w_o: Array<f64>,
    pub x_tgt: Array<f64>,
    pub x_ref: Array<f64>,
}

impl AttnGrads {
    pub fn named(&self) -> Vec<(&'static str, &Array<f64>)> {
        vec![
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("x_tgt", &self.x_tgt),
            ("x_ref", &self.x_ref),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub parameter: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub fd_step: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn branch_inputs(p: &AttnProblem, path: AttnPath) -> Result<(Array<f64>, Array<f64>, Vec<Coord>, Vec<Coord>)> {
    match path {
        AttnPath::Target => Ok((
            p.x_tgt.clone(),
            crate::numerics::concat(0, &[&p.x_tgt, &p.x_ref])?,
            p.coords_tgt.clone(),
            p.coords_tgt.iter().chain(&p.coords_ref).copied().collect(),
        )),
        AttnPath::Reference => Ok((p.x_ref.clone(), p.x_ref.clone(), p.coords_ref.clone(), p.coords_ref.clone())),
    }
}

/// Loop-level forward that retains every intermediate.
pub fn attn_forward(p: &AttnProblem, path: AttnPath) -> Result<SavedForward> {
    let (x_q, x_kv, coords_q, coords_kv) = branch_inputs(p, path)?;
    let q_rot = apply_rope(&matmul(&x_q, &p.proj.w_q)?, &coords_q, &p.rope)?;
    let k_rot = apply_rope(&matmul(&x_kv, &p.proj.w_k)?, &coords_kv, &p.rope)?;
    let v = matmul(&x_kv, &p.proj.w_v)?;
    let (nq, dim) = (q_rot.rows(), q_rot.row_len());
    let nk = k_rot.rows();
    let heads = p.proj.heads();
    let d = dim / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = Vec::with_capacity(heads);
    let mut mixed = vec![0.0; nq * dim];
    for h in 0..heads {
        let mut w = vec![0.0; nq * nk];
        for i in 0..nq {
            let row = &mut w[i * nk..(i + 1) * nk];
            for (j, s) in row.iter_mut().enumerate() {
                *s = (0..d).map(|c| q_rot.data()[i * dim + h * d + c] * k_rot.data()[j * dim + h * d + c]).sum::<f64>() * scale;
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
            for c in 0..d {
                mixed[i * dim + h * d + c] = (0..nk).map(|j| row[j] * v.data()[j * dim + h * d + c]).sum();
            }
        }
        weights.push(Array::new([nq, nk], w)?);
    }
    let mixed = Array::new([nq, dim], mixed)?;
    let output = matmul(&mixed, &p.proj.w_o)?;
    Ok(SavedForward {
        path,
        n_tgt: p.x_tgt.rows(),
        x_q,
        x_kv,
        coords_q,
        coords_kv,
        q_rot,
        k_rot,
        v,
        weights: Some(weights),
        mixed: Some(mixed),
        output,
    })
}

/// Exact gradients of `sum(d_out * output)`.
pub fn attn_backward(saved: &SavedForward, d_out: &Array<f64>, proj: &ProjectionSet<f64>, rope: &RopeConfig) -> Result<AttnGrads> {
    let weights = saved.weights.as_ref().ok_or(Error::MissingIntermediates("attention weights"))?;
    let mixed = saved.mixed.as_ref().ok_or(Error::MissingIntermediates("head outputs"))?;
    if d_out.shape() != saved.output.shape() {
        return Err(Error::ShapeMismatch {
            op: "attn_backward",
            lhs: saved.output.shape().to_vec(),
            rhs: d_out.shape().to_vec(),
        });
    }
    let (nq, dim) = (saved.q_rot.rows(), saved.q_rot.row_len());
    let nk = saved.k_rot.rows();
    let heads = proj.heads();
    let d = dim / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let w_o = matmul(&mixed.t()?, d_out)?;
    let d_mixed = matmul(d_out, &proj.w_o.t()?)?;
    let (dm, qr, kr, v) = (d_mixed.data(), saved.q_rot.data(), saved.k_rot.data(), saved.v.data());
    let mut dq_rot = vec![0.0; nq * dim];
    let mut dk_rot = vec![0.0; nk * dim];
    let mut dv = vec![0.0; nk * dim];
    for (h, p) in weights.iter().enumerate() {
        let p = p.data();
        let col = |r: usize, c: usize| r * dim + h * d + c;
        for i in 0..nq {
            let prow = &p[i * nk..(i + 1) * nk];
            let dp: Vec<f64> = (0..nk).map(|j| (0..d).map(|c| dm[col(i, c)] * v[col(j, c)]).sum()).collect();
            let inner: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
            for j in 0..nk {
                let ds = prow[j] * (dp[j] - inner) * scale;
                for c in 0..d {
                    dq_rot[col(i, c)] += ds * kr[col(j, c)];
                    dk_rot[col(j, c)] += ds * qr[col(i, c)];
                    dv[col(j, c)] += prow[j] * dm[col(i, c)];
                }
            }
        }
    }
    let q = apply_rope_transpose(&Array::new([nq, dim], dq_rot)?, &saved.coords_q, rope)?;
    let k = apply_rope_transpose(&Array::new([nk, dim], dk_rot)?, &saved.coords_kv, rope)?;
    let v = Array::new([nk, dim], dv)?;
    let w_q = matmul(&saved.x_q.t()?, &q)?;
    let w_k = matmul(&saved.x_kv.t()?, &k)?;
    let w_v = matmul(&saved.x_kv.t()?, &v)?;
    let dx_q = matmul(&q, &proj.w_q.t()?)?;
    let dx_kv = matmul(&k, &proj.w_k.t()?)?.add(&matmul(&v, &proj.w_v.t()?)?)?;
    let (x_tgt, x_ref) = match saved.path {
        AttnPath::Target => {
            let n = saved.n_tgt;
            (
                dx_q.add(&dx_kv.slice_axis(0, 0..n)?)?,
                dx_kv.slice_axis(0, n..nk)?,
            )
        }
        AttnPath::Reference => (Array::zeros([saved.n_tgt, dim]), dx_q.add(&dx_kv)?),
    };
    Ok(AttnGrads { q, k, v, w_q, w_k, w_v, w_o, x_tgt, x_ref })
}

/// Central differences `(L(p + h e_i) - L(p - h e_i)) / 2h`.
pub fn finite_diff(loss: impl Fn(&Array<f64>) -> Result<f64>, param: &Array<f64>, h: f64) -> Result<Array<f64>> {
    if !(h > 0.0) {
        return Err(invalid("finite_diff", format!("step {h} must be positive")));
    }
    let mut out = Vec::with_capacity(param.len());
    let mut probe = param.data().to_vec();
    for i in 0..param.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = loss(&Array::new(param.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - h;
        let down = loss(&Array::new(param.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Array::new(param.shape().to_vec(), out)
}

pub fn verify(parameter: &str, grads: &Array<f64>, fd: &Array<f64>, tol: f64, fd_step: f64) -> Result<GradReport> {
    grads.expect_same_shape(fd, "verify")?;
    let mut max_abs_err: f64 = 0.0;
    let mut max_rel_err: f64 = 0.0;
    for (&a, &b) in grads.data().iter().zip(fd.data()) {
        let err = (a - b).abs();
        max_abs_err = max_abs_err.max(err);
        let mag = a.abs().max(b.abs());
        if mag > MAGNITUDE_FLOOR {
            max_rel_err = max_rel_err.max(err / mag);
        }
    }
    Ok(GradReport {
        parameter: parameter.to_string(),
        max_abs_err,
        max_rel_err,
        fd_step,
        tolerance: tol,
        pass: max_rel_err < tol,
    })
}

/// `sum(output)` of the production attention for one path.
fn production_loss(p: &AttnProblem, path: AttnPath) -> Result<f64> {
    let y = match path {
        AttnPath::Target => {
            let (_, kv) = project_branch(&p.x_ref, &p.coords_ref, &p.proj, &p.rope)?;
            tgt_causal_attn(&p.x_tgt, &p.coords_tgt, &kv, &p.proj, &p.rope)?
        }
        AttnPath::Reference => ref_self_attn(&p.x_ref, &p.coords_ref, &p.proj, &p.rope)?,
    };
    Ok(y.sum())
}

/// `sum(Attn(R(q), R(k), v) W_O)` with projections supplied directly.
fn loss_from_qkv(p: &AttnProblem, saved: &SavedForward, q: &Array<f64>, k: &Array<f64>, v: &Array<f64>) -> Result<f64> {
    let qr = apply_rope(q, &saved.coords_q, &p.rope)?;
    let kr = apply_rope(k, &saved.coords_kv, &p.rope)?;
    let mixed = crate::attention::attend(&qr, &kr, v, p.proj.heads(), None)?;
    Ok(matmul(&mixed, &p.proj.w_o)?.sum())
}

/// Compares every analytic gradient of one path against finite differences.
pub fn check_path(p: &AttnProblem, path: AttnPath, h: f64, tol: f64) -> Result<Vec<GradReport>> {
    let saved = attn_forward(p, path)?;
    let ones = Array::full(saved.output.shape().to_vec(), 1.0);
    let g = attn_backward(&saved, &ones, &p.proj, &p.rope)?;
    let q0 = matmul(&saved.x_q, &p.proj.w_q)?;
    let k0 = matmul(&saved.x_kv, &p.proj.w_k)?;
    let v0 = matmul(&saved.x_kv, &p.proj.w_v)?;

    let with_weight = |slot: usize, w: &Array<f64>| -> Result<f64> {
        let mut proj = p.proj.clone();
        *[&mut proj.w_q, &mut proj.w_k, &mut proj.w_v, &mut proj.w_o][slot] = w.clone();
        production_loss(&AttnProblem { proj, ..p.clone() }, path)
    };
    let mut fd: Vec<(&str, Array<f64>)> = vec![
        ("q", finite_diff(|q| loss_from_qkv(p, &saved, q, &k0, &v0), &q0, h)?),
        ("k", finite_diff(|k| loss_from_qkv(p, &saved, &q0, k, &v0), &k0, h)?),
        ("v", finite_diff(|v| loss_from_qkv(p, &saved, &q0, &k0, v), &v0, h)?),
        ("w_q", finite_diff(|w| with_weight(0, w), &p.proj.w_q, h)?),
        ("w_k", finite_diff(|w| with_weight(1, w), &p.proj.w_k, h)?),
        ("w_v", finite_diff(|w| with_weight(2, w), &p.proj.w_v, h)?),
        ("w_o", finite_diff(|w| with_weight(3, w), &p.proj.w_o, h)?),
    ];
    if path == AttnPath::Target {
        fd.push(("x_tgt", finite_diff(|x| production_loss(&AttnProblem { x_tgt: x.clone(), ..p.clone() }, path), &p.x_tgt, h)?));
    }
    fd.push(("x_ref", finite_diff(|x| production_loss(&AttnProblem { x_ref: x.clone(), ..p.clone() }, path), &p.x_ref, h)?));

    let analytic = g.named();
    fd.iter()
        .map(|(name, est)| {
            let (_, a) = analytic.iter().find(|(n, _)| n == name).expect("every name has a gradient");
            verify(&format!("{path:?}.{name}").to_lowercase(), a, est, tol, h)
        })
        .collect()
}

/// Random problem: `n_tgt` target and `n_ref` reference tokens, `heads` heads of width `head_dim`.
pub fn random_problem(seed: u64, n_tgt: usize, n_ref: usize, heads: usize, head_dim: usize, ref_bias: [i64; 3]) -> Result<AttnProblem> {
    use crate::numerics::{seeded_normal, Rng};
    let dim = heads * head_dim;
    let mut rng = Rng::for_label(seed, "gradcheck.problem");
    let proj = ProjectionSet::<f64>::seeded(seed, "gradcheck", dim, heads)?;
    let coords = |n: usize, rng: &mut Rng, off: [i64; 3]| -> Vec<Coord> {
        (0..n)
            .map(|_| [rng.int_range(0, 4) + off[0], rng.int_range(0, 4) + off[1], rng.int_range(0, 4) + off[2]])
            .collect()
    };
    let coords_tgt = coords(n_tgt, &mut rng, [0; 3]);
    let coords_ref = coords(n_ref, &mut rng, ref_bias);
    Ok(AttnProblem {
        x_tgt: seeded_normal([n_tgt, dim], &mut rng),
        x_ref: seeded_normal([n_ref, dim], &mut rng),
        coords_tgt,
        coords_ref,
        proj,
        rope: RopeConfig::new(head_dim)?,
    })
}

/// Key/value segment of the reference branch, for callers mixing paths.
pub fn reference_kv(p: &AttnProblem) -> Result<KvSegment<f64>> {
    Ok(project_branch(&p.x_ref, &p.coords_ref, &p.proj, &p.rope)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_normal, Rng};

    #[test]
    fn quadratic_and_linear_losses() {
        let p = Array::new([1], vec![3.0]).unwrap();
        let g = finite_diff(|x| Ok(x.data()[0] * x.data()[0]), &p, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-9);
        for h in [1e-1, 1e-3, 1.0] {
            let g = finite_diff(|x| Ok(2.5 * x.data()[0] - 1.0), &p, h).unwrap();
            assert!((g.data()[0] - 2.5).abs() < 1e-12);
        }
        assert!(finite_diff(|x| Ok(x.sum()), &p, 0.0).is_err());
    }

    #[test]
    fn verify_examples() {
        let a = seeded_normal::<f64>([3, 3], &mut Rng::new(1));
        let r = verify("a", &a, &a, DEFAULT_TOLERANCE, DEFAULT_STEP).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_rel_err, 0.0);
        let mut data = a.data().to_vec();
        data[4] *= 1.1;
        let b = Array::new([3, 3], data).unwrap();
        assert!(!verify("a", &a, &b, DEFAULT_TOLERANCE, DEFAULT_STEP).unwrap().pass);
        assert!(verify("a", &a, &Array::zeros([9]), 1e-4, 1e-5).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        let p = random_problem(1, 3, 2, 2, 4, [0, 4, 0]).unwrap();
        let saved = attn_forward(&p, AttnPath::Target).unwrap();
        let g = attn_backward(&saved, &Array::zeros(saved.output.shape().to_vec()), &p.proj, &p.rope).unwrap();
        for (_, a) in g.named() {
            assert!(a.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn missing_intermediates_rejected() {
        let p = random_problem(2, 2, 2, 1, 4, [0; 3]).unwrap();
        let saved = attn_forward(&p, AttnPath::Reference).unwrap().discard();
        let err = attn_backward(&saved, &Array::zeros(saved.output.shape().to_vec()), &p.proj, &p.rope).unwrap_err();
        assert!(matches!(err, Error::MissingIntermediates(_)));
    }

    #[test]
    fn loop_forward_matches_production() {
        let p = random_problem(3, 4, 3, 2, 4, [2, 0, 0]).unwrap();
        let t = attn_forward(&p, AttnPath::Target).unwrap();
        let kv = reference_kv(&p).unwrap();
        let prod = tgt_causal_attn(&p.x_tgt, &p.coords_tgt, &kv, &p.proj, &p.rope).unwrap();
        assert!(t.output.max_abs_diff(&prod).unwrap() < 1e-12);
        let r = attn_forward(&p, AttnPath::Reference).unwrap();
        let prod = ref_self_attn(&p.x_ref, &p.coords_ref, &p.proj, &p.rope).unwrap();
        assert!(r.output.max_abs_diff(&prod).unwrap() < 1e-12);
    }

    #[test]
    fn single_token_identity_weights() {
        // one token attends only to itself: y = x W_V W_O, so dL/dV = dOut W_O^T
        let dim = 4;
        let eye = Array::<f64>::eye(dim);
        let proj = ProjectionSet::new(eye.clone(), eye.clone(), eye.clone(), eye, 1).unwrap();
        let p = AttnProblem {
            x_tgt: Array::zeros([0, dim]),
            x_ref: seeded_normal([1, dim], &mut Rng::new(4)),
            coords_tgt: vec![],
            coords_ref: vec![[1, 2, 3]],
            proj,
            rope: RopeConfig::new(dim).unwrap(),
        };
        let saved = attn_forward(&p, AttnPath::Reference).unwrap();
        let d_out = seeded_normal::<f64>([1, dim], &mut Rng::new(5));
        let g = attn_backward(&saved, &d_out, &p.proj, &p.rope).unwrap();
        assert!(g.v.max_abs_diff(&d_out).unwrap() < 1e-15);
    }

    #[test]
    fn rotation_transpose_is_negative_angle() {
        let rope = RopeConfig::new(8).unwrap();
        let mut rng = Rng::new(6);
        let x = seeded_normal::<f64>([5, 16], &mut rng);
        let dy = seeded_normal::<f64>([5, 16], &mut rng);
        let coords: Vec<Coord> = (0..5).map(|i| [i, 2 * i - 3, 7 - i]).collect();
        let neg: Vec<Coord> = coords.iter().map(|c| [-c[0], -c[1], -c[2]]).collect();
        let back = apply_rope_transpose(&dy, &coords, &rope).unwrap();
        assert!(back.max_abs_diff(&apply_rope(&dy, &neg, &rope).unwrap()).unwrap() < 1e-10);
        let lhs: f64 = apply_rope(&x, &coords, &rope).unwrap().zip_map(&dy, "dot", |a, b| a * b).unwrap().sum();
        let rhs: f64 = x.zip_map(&back, "dot", |a, b| a * b).unwrap().sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn target_path_small_instance() {
        let p = random_problem(7, 3, 2, 2, 4, [0, 3, 0]).unwrap();
        for r in check_path(&p, AttnPath::Target, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn reference_path_small_instance() {
        let p = random_problem(8, 2, 5, 2, 4, [3, 0, 0]).unwrap();
        let reports = check_path(&p, AttnPath::Reference, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(reports.len(), 8);
        for r in reports {
            assert!(r.pass, "{r:?}");
        }
    }
}
