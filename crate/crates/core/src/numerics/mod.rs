//! Deterministic dense-array substrate shared by every other module.
//!
//! Arrays are immutable values; every operation returns a fresh array.
//! Precision is chosen by the element type: `f32` for normal runs, `f64`
//! for equivalence oracles and gradient checks.

mod array;
mod ops;
mod rng;
mod scalar;

pub use array::Array;
pub use ops::{
    concat, gelu, layer_norm, linear, matmul, parallel_enabled, set_parallel, silu,
    softmax_rows,
};
pub(crate) use ops::softmax_in_place;
pub use rng::{label_hash, seeded_normal, Rng};
pub use scalar::{DType, Scalar};

#[cfg(test)]
mod proptests {
    use proptest::prelude::*;
    use crate::numerics::Rng;

    use super::*;

    proptest! {
        #[test]
        fn matmul_equals_triple_loop(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = seeded_normal::<f64>([m, k], &mut rng);
            let b = seeded_normal::<f64>([k, n], &mut rng);
            let c = matmul(&a, &b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for t in 0..k {
                        s += a.data()[i * k + t] * b.data()[t * n + j];
                    }
                    prop_assert_eq!(c.data()[i * n + j], s);
                }
            }
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..24),
            shift in -100.0f64..100.0,
        ) {
            let n = row.len();
            let a = Array::<f64>::new([1, n], row.clone()).unwrap();
            let b = Array::<f64>::new([1, n], row.iter().map(|x| x + shift).collect()).unwrap();
            let sa = softmax_rows(&a).unwrap();
            let sb = softmax_rows(&b).unwrap();
            prop_assert!((sa.sum() - 1.0).abs() < 1e-9);
            prop_assert!(sa.data().iter().all(|&p| p >= 0.0));
            prop_assert!(sa.max_abs_diff(&sb).unwrap() < 1e-9);
            // inputs untouched
            prop_assert_eq!(a.data(), row.as_slice());
        }
    }
}
