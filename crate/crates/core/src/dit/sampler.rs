//! Euler sampling of the rectified-flow ODE, `t = k / S` for `k = S..1`.

use super::{Conditioning, ContextKv, DitModel};
use crate::error::{invalid, Result};
use crate::latents::{LatentBlock, TaskSpec};
use crate::numerics::{Array, Scalar};

fn check(steps: usize, target: &LatentBlock<impl Scalar>, z_init: &Array<impl Scalar>) -> Result<()> {
    if steps == 0 {
        return Err(invalid("sample", "at least one step is required"));
    }
    let (f, h, w) = target.grid();
    let n = target.latent_channels()?;
    if z_init.shape() != [f, h, w, n] {
        return Err(invalid(
            "sample",
            format!("initial noise {:?} does not match target [{f}, {h}, {w}, {n}]", z_init.shape()),
        ));
    }
    Ok(())
}

fn euler<T: Scalar>(
    target: &LatentBlock<T>,
    steps: usize,
    z_init: &Array<T>,
    mut velocity: impl FnMut(&LatentBlock<T>, f64) -> Result<Array<T>>,
) -> Result<Array<T>> {
    check(steps, target, z_init)?;
    let dt = T::one() / T::of(steps as f64);
    let mut z = z_init.clone();
    for k in (1..=steps).rev() {
        let t = k as f64 / steps as f64;
        let v = velocity(&target.with_noise_part(&z)?, t)?;
        z = z.zip_map(&v, "euler", |a, b| a - b * dt)?;
    }
    Ok(z)
}

/// Decoupled sampling against a prebuilt cache: one target pass per step.
///
/// `target` supplies the condition and mask parts; its noise part is replaced by `z_init`.
pub fn sample<T: Scalar>(
    model: &DitModel<T>,
    target: &LatentBlock<T>,
    cond: Conditioning<'_, T>,
    steps: usize,
    z_init: &Array<T>,
) -> Result<Array<T>> {
    model.check_cache(cond.cache, target)?;
    euler(target, steps, z_init, |l, t| model.model_forward(l, cond, t))
}

/// Decoupled sampling that rebuilds the reference cache at every step.
pub fn sample_recompute<T: Scalar>(
    model: &DitModel<T>,
    target: &LatentBlock<T>,
    l_ref: &LatentBlock<T>,
    task: &TaskSpec,
    context: Option<&ContextKv<T>>,
    steps: usize,
    z_init: &Array<T>,
) -> Result<Array<T>> {
    euler(target, steps, z_init, |l, t| {
        let cache = model.ref_branch_forward(l_ref, task, l.grid(), context)?;
        model.model_forward(l, Conditioning { cache: &cache, context }, t)
    })
}

/// Baseline sampling: both branches pass through the network at every step.
pub fn sample_joint<T: Scalar>(
    model: &DitModel<T>,
    target: &LatentBlock<T>,
    l_ref: &LatentBlock<T>,
    task: &TaskSpec,
    context: Option<&ContextKv<T>>,
    steps: usize,
    z_init: &Array<T>,
) -> Result<Array<T>> {
    euler(target, steps, z_init, |l, t| model.joint_forward(l, l_ref, task, t, context))
}
