use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{Array, Scalar};

/// Seeded counter-based generator (ChaCha8). The keystream depends only on
/// `(seed, stream)`, never on the platform or thread layout.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Independent generator for a named purpose, e.g. one weight tensor.
    pub fn for_label(seed: u64, label: &str) -> Self {
        Self::with_stream(seed, label_hash(label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
}

/// Stable 64-bit digest of a label (first 8 bytes of SHA-256).
pub fn label_hash(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Standard-normal samples, drawn in f64 and rounded to `T`.
pub fn seeded_normal<T: Scalar>(shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Array<T> {
    Array::from_fn(shape, |_| T::of(rng.normal()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_arrays() {
        let a: Array<f32> = seeded_normal([3, 4], &mut Rng::new(9));
        let b: Array<f32> = seeded_normal([3, 4], &mut Rng::new(9));
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }

    #[test]
    fn different_seeds_differ() {
        let a: Array<f64> = seeded_normal([16], &mut Rng::new(1));
        let b: Array<f64> = seeded_normal([16], &mut Rng::new(2));
        assert_ne!(a, b);
    }

    #[test]
    fn streams_are_independent() {
        let a: Array<f64> = seeded_normal([8], &mut Rng::for_label(5, "w_q"));
        let b: Array<f64> = seeded_normal([8], &mut Rng::for_label(5, "w_k"));
        assert_ne!(a, b);
    }

    #[test]
    fn moments_of_many_samples() {
        let a: Array<f64> = seeded_normal([100_000], &mut Rng::new(2024));
        let n = a.len() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let var = a.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }
}
