//! Input fixtures shared by the attention benchmarks.

use longgen_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` query, key, value and output-gradient matrices of shape `n × d`.
pub fn qkv_grad(n: usize, d: usize, seed: u64) -> [Matrix; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::array::from_fn(|_| Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded() {
        let a = qkv_grad(8, 4, 3);
        let b = qkv_grad(8, 4, 3);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert_eq!((a[3].rows(), a[3].cols()), (8, 4));
    }
}
