//! Target and reference latent construction.
//!
//! An assembled latent has `2n + 4` channels laid out as `[c, m, z]`:
//! `n` condition channels, 4 mask channels, `n` noise (or clean) channels.
//! Target latents carry the first-frame condition and a binary
//! preserved-frame mask; reference latents carry the encoded reference in
//! both `c` and `z` (never noised) and a task flag in every mask cell.

mod format;
mod task;

pub use format::{decode_array, encode_array, read_array, write_array, LATENT_MAGIC, LATENT_VERSION};
pub use task::{QueryBankId, TaskCategory, TaskKind, TaskSpec};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{concat, matmul, Array, Rng, Scalar, seeded_normal};

pub const MASK_CHANNELS: usize = 4;

/// Temporal and spatial downsampling of the stub encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderFactors {
    pub temporal: usize,
    pub spatial: usize,
}

impl Default for EncoderFactors {
    fn default() -> Self {
        Self {
            temporal: 4,
            spatial: 8,
        }
    }
}

/// Stand-in for a video VAE: block mean-pool then a fixed linear lift 3 -> n.
#[derive(Debug, Clone)]
pub struct StubEncoder<T> {
    factors: EncoderFactors,
    lift: Array<T>,
}

impl<T: Scalar> StubEncoder<T> {
    pub fn new(seed: u64, channels: usize, factors: EncoderFactors) -> Result<Self> {
        if factors.temporal == 0 || factors.spatial == 0 || channels == 0 {
            return Err(invalid("StubEncoder::new", "factors and channel count must be positive"));
        }
        let mut rng = Rng::for_label(seed, "encoder.lift");
        let lift = seeded_normal::<f64>([3, channels], &mut rng)
            .scale(1.0 / 3f64.sqrt())
            .cast();
        Ok(Self { factors, lift })
    }

    pub fn factors(&self) -> EncoderFactors {
        self.factors
    }

    pub fn channels(&self) -> usize {
        self.lift.shape()[1]
    }

    pub fn lift(&self) -> &Array<T> {
        &self.lift
    }

    /// `[F, H, W, 3]` clip to `[f, h, w, n]` latent.
    pub fn encode(&self, clip: &Array<T>) -> Result<Array<T>> {
        let pooled = block_mean_pool(clip, self.factors)?;
        let (f, h, w) = (pooled.shape()[0], pooled.shape()[1], pooled.shape()[2]);
        let flat = pooled.reshape([f * h * w, 3])?;
        matmul(&flat, &self.lift)?.reshape([f, h, w, self.channels()])
    }
}

/// Mean over `temporal x spatial x spatial` blocks of a `[F, H, W, C]` clip.
///
/// Extents that are not multiples of the factors are padded by repeating the
/// last frame / row / column, so `f = ceil(F / ft)` and likewise for `h, w`.
pub fn block_mean_pool<T: Scalar>(clip: &Array<T>, factors: EncoderFactors) -> Result<Array<T>> {
    let &[frames, height, width, ch] = clip.shape() else {
        return Err(invalid("encode_stub", format!("expected [F, H, W, C] clip, got {:?}", clip.shape())));
    };
    if frames == 0 || height == 0 || width == 0 || ch == 0 {
        return Err(invalid("encode_stub", format!("zero-sized clip {:?}", clip.shape())));
    }
    let (ft, fs) = (factors.temporal, factors.spatial);
    let (f, h, w) = (frames.div_ceil(ft), height.div_ceil(fs), width.div_ceil(fs));
    let count = (ft * fs * fs) as f64;
    let src = clip.data();
    let mut out = Vec::with_capacity(f * h * w * ch);
    for bf in 0..f {
        for bh in 0..h {
            for bw in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0f64;
                    for dt in 0..ft {
                        let t = (bf * ft + dt).min(frames - 1);
                        for dy in 0..fs {
                            let y = (bh * fs + dy).min(height - 1);
                            for dx in 0..fs {
                                let x = (bw * fs + dx).min(width - 1);
                                acc += src[((t * height + y) * width + x) * ch + c].as_f64();
                            }
                        }
                    }
                    out.push(T::of(acc / count));
                }
            }
        }
    }
    Array::new([f, h, w, ch], out)
}

/// Rectified-flow interpolation `z_t = (1 - t) z0 + t eps`.
pub fn add_noise<T: Scalar>(z0: &Array<T>, t: f64, eps: &Array<T>) -> Result<Array<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid("add_noise", format!("timestep {t} outside [0, 1]")));
    }
    let (a, b) = (T::of(1.0 - t), T::of(t));
    z0.zip_map(eps, "add_noise", |z, e| a * z + b * e)
}

/// A `[f, h, w, channels]` latent with its grid origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock<T> {
    data: Array<T>,
    /// Offset of the block's first cell in (frame, height, width) grid units.
    pub grid_origin: [i64; 3],
}

impl<T: Scalar> LatentBlock<T> {
    pub fn new(data: Array<T>) -> Result<Self> {
        let ok = matches!(data.shape(), &[f, h, w, c] if f >= 1 && h >= 1 && w >= 1 && c >= 1);
        if !ok {
            return Err(invalid(
                "LatentBlock::new",
                format!("expected [f, h, w, channels] with positive extents, got {:?}", data.shape()),
            ));
        }
        Ok(Self {
            data,
            grid_origin: [0; 3],
        })
    }

    pub fn data(&self) -> &Array<T> {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tokens(&self) -> usize {
        self.frames() * self.height() * self.width()
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (self.frames(), self.height(), self.width())
    }

    /// `n` for an assembled `[c, m, z]` latent.
    pub fn latent_channels(&self) -> Result<usize> {
        let c = self.channels();
        if c < MASK_CHANNELS + 2 || !(c - MASK_CHANNELS).is_multiple_of(2) {
            return Err(invalid(
                "LatentBlock",
                format!("{c} channels is not of the form 2n + 4"),
            ));
        }
        Ok((c - MASK_CHANNELS) / 2)
    }

    pub fn condition(&self) -> Result<Array<T>> {
        let n = self.latent_channels()?;
        self.data.slice_axis(3, 0..n)
    }

    pub fn mask(&self) -> Result<Array<T>> {
        let n = self.latent_channels()?;
        self.data.slice_axis(3, n..n + MASK_CHANNELS)
    }

    pub fn noise_part(&self) -> Result<Array<T>> {
        let n = self.latent_channels()?;
        self.data.slice_axis(3, n + MASK_CHANNELS..2 * n + MASK_CHANNELS)
    }

    /// Same `c` and `m`, with `z` replaced.
    pub fn with_noise_part(&self, z: &Array<T>) -> Result<Self> {
        let c = self.condition()?;
        if z.shape() != c.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_noise_part",
                lhs: c.shape().to_vec(),
                rhs: z.shape().to_vec(),
            });
        }
        let data = concat(3, &[&c, &self.mask()?, z])?;
        Ok(Self {
            data,
            grid_origin: self.grid_origin,
        })
    }

    /// Token matrix `[f*h*w, channels]` in row-major (frame, height, width) order.
    pub fn token_matrix(&self) -> Array<T> {
        self.data
            .reshape([self.tokens(), self.channels()])
            .expect("token count matches")
    }
}

/// Assembles `[c, m, z_t]` for the target: `c` holds the first-frame latent in
/// frame 0 and zeros elsewhere, `m` is 1 on frame 0 and 0 on generated frames.
pub fn build_target_latent<T: Scalar>(cond_image_latent: &Array<T>, z_t: &Array<T>) -> Result<LatentBlock<T>> {
    let &[f, h, w, n] = z_t.shape() else {
        return Err(invalid("build_target_latent", format!("z_t must be [f, h, w, n], got {:?}", z_t.shape())));
    };
    if cond_image_latent.shape() != [1, h, w, n] {
        return Err(Error::ShapeMismatch {
            op: "build_target_latent",
            lhs: vec![1, h, w, n],
            rhs: cond_image_latent.shape().to_vec(),
        });
    }
    let frame = h * w * n;
    let mut c = vec![T::zero(); f * frame];
    c[..frame].copy_from_slice(cond_image_latent.data());
    let c = Array::new([f, h, w, n], c)?;
    let m = Array::from_fn([f, h, w, MASK_CHANNELS], |i| {
        if i < h * w * MASK_CHANNELS {
            T::one()
        } else {
            T::zero()
        }
    });
    LatentBlock::new(concat(3, &[&c, &m, z_t])?)
}

/// Target latent for text-to-video tasks: no condition image, nothing preserved.
pub fn build_unconditioned_target_latent<T: Scalar>(z_t: &Array<T>) -> Result<LatentBlock<T>> {
    let &[f, h, w, n] = z_t.shape() else {
        return Err(invalid("build_target_latent", format!("z_t must be [f, h, w, n], got {:?}", z_t.shape())));
    };
    let c = Array::zeros([f, h, w, n]);
    let m = Array::zeros([f, h, w, MASK_CHANNELS]);
    LatentBlock::new(concat(3, &[&c, &m, z_t])?)
}

/// Assembles `[c_ref, m_ref, z0_ref]`: the encoded reference appears in both
/// `c_ref` and the noise-free `z0_ref`; every mask cell holds the task flag.
pub fn build_reference_latent<T: Scalar>(ref_latent: &Array<T>, task: &TaskSpec) -> Result<LatentBlock<T>> {
    let &[f, h, w, _] = ref_latent.shape() else {
        return Err(invalid(
            "build_reference_latent",
            format!("reference must be [f, h, w, n], got {:?}", ref_latent.shape()),
        ));
    };
    if !task.is_consistent() {
        return Err(invalid("build_reference_latent", format!("inconsistent task spec {task:?}")));
    }
    let m = Array::full([f, h, w, MASK_CHANNELS], T::of(task.mask_flag));
    LatentBlock::new(concat(3, &[ref_latent, &m, ref_latent])?)
}


#[cfg(test)]
mod proptests {
    use proptest::prelude::*;
    use crate::numerics::Rng;

    use super::*;

    proptest! {
        #[test]
        fn add_noise_is_affine(seed in any::<u64>(), t in 0.0f64..=1.0, a in -4.0f64..4.0) {
            let mut rng = Rng::new(seed);
            let z0 = seeded_normal::<f64>([2, 2, 2, 4], &mut rng);
            let eps = seeded_normal::<f64>([2, 2, 2, 4], &mut rng);
            let lhs = add_noise(&z0.scale(a), t, &eps.scale(a)).unwrap();
            let rhs = add_noise(&z0, t, &eps).unwrap().scale(a);
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-7);
        }

        #[test]
        fn assembled_latents_roundtrip(seed in any::<u64>(), f in 1usize..4, h in 1usize..4, w in 1usize..4, n in 1usize..8, k in 0usize..5) {
            let mut rng = Rng::new(seed);
            let r = seeded_normal::<f32>([f, h, w, n], &mut rng);
            let task = TaskSpec::new(TaskKind::ALL[k]);
            let a = build_reference_latent(&r, &task).unwrap();
            let b = build_reference_latent(&r, &task).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.channels(), 2 * n + 4);
            let rebuilt = concat(3, &[&a.condition().unwrap(), &a.mask().unwrap(), &a.noise_part().unwrap()]).unwrap();
            prop_assert_eq!(&rebuilt, a.data());
        }
    }
}
