//! Seed derivation and the narrow randomness interface used by corruption
//! and pairing code.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The two kinds of draws the data pipeline makes. Implemented for every
/// `RngCore`; tests substitute fixed stubs.
pub trait Draw {
    /// Uniform in `[0, 1)`.
    fn unit(&mut self) -> f64;
    /// Uniform in `[0, n)`; `n` must be positive.
    fn below(&mut self, n: usize) -> usize;
}

impl<R: RngCore + ?Sized> Draw for R {
    fn unit(&mut self) -> f64 {
        self.random::<f64>()
    }

    fn below(&mut self, n: usize) -> usize {
        self.random_range(0..n)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with stream coordinates (e.g. doc id and sentence index).
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, parts))
}

/// In-place Fisher-Yates shuffle driven by a [`Draw`].
pub fn shuffle<T, D: Draw + ?Sized>(items: &mut [T], draw: &mut D) {
    for i in (1..items.len()).rev() {
        let j = draw.below(i + 1);
        items.swap(i, j);
    }
}

/// Always returns the same unit draw and `below` answer.
#[derive(Clone, Copy, Debug)]
pub struct FixedDraw {
    pub unit: f64,
    pub index: usize,
}

impl Draw for FixedDraw {
    fn unit(&mut self) -> f64 {
        self.unit
    }

    fn below(&mut self, n: usize) -> usize {
        self.index % n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        assert_eq!(stream_seed(1, &[2, 3]), stream_seed(1, &[2, 3]));
        assert_ne!(stream_seed(1, &[2, 3]), stream_seed(1, &[3, 2]));
        assert_ne!(stream_seed(1, &[2, 3]), stream_seed(2, &[2, 3]));
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        shuffle(&mut v, &mut stream(9, &[]));
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
