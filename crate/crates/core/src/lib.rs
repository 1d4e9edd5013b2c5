//! Reference-decoupled video transfer attention at desk scale.
//!
//! The crate builds reference and target video latents, positions reference
//! tokens with a task-dependent 3D RoPE offset, runs target tokens causally
//! over a time-invariant reference KV cache, and conditions the target branch
//! on per-task query banks. Around that it ships an analytic attention
//! backward with finite-difference checks, a FLOP model with wall-clock
//! benchmarks, and an invariant suite used by the `omnixfer` CLI.

pub mod attention;
pub mod bench;
pub mod dit;
pub mod error;
pub mod gradcheck;
pub mod invariants;
pub mod latents;
pub mod numerics;
pub mod rope;
pub mod tma;

pub use error::{Error, Result};
pub use numerics::{Array, DType, Rng, Scalar};
