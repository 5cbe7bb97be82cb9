//! Random draws used by the variation operators.
//!
//! Operators take a [`Draw`] rather than a concrete generator so tests can
//! script exact draw sequences. Every `rand` generator implements it.
//!
//! A search run has one master seed. Each phase of the run reads from its own
//! ChaCha8 stream of that seed (see [`stream`]), so the order in which
//! evaluation results come back can never shift the randomness of a later
//! generation.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Source of the two kinds of uniform draws the operators need.
pub trait Draw {
    /// Uniform real in `[0, 1)`.
    fn unit(&mut self) -> f64;
    /// Uniform integer in `0..n`. `n` must be positive.
    fn below(&mut self, n: usize) -> usize;
}

impl<R: RngCore + ?Sized> Draw for R {
    fn unit(&mut self) -> f64 {
        self.random::<f64>()
    }

    fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) has no valid outcome");
        self.random_range(0..n)
    }
}

/// Stream used to draw the initial population.
pub const INITIAL_STREAM: u64 = 0;
/// Stream used by the random-search baseline.
pub const RANDOM_SEARCH_STREAM: u64 = u64::MAX;

/// Stream used for the variation step of generation `generation` (0-based).
pub fn generation_stream(generation: u32) -> u64 {
    u64::from(generation) + 1
}

/// ChaCha8 generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let mut r0 = stream(7, 1);
        let mut r1 = stream(7, 1);
        let mut r2 = stream(7, 2);
        let a: [u64; 4] = core::array::from_fn(|_| r0.next_u64());
        let b: [u64; 4] = core::array::from_fn(|_| r1.next_u64());
        let c: [u64; 4] = core::array::from_fn(|_| r2.next_u64());
        assert_eq!(a, b);
        assert_ne!(b, c);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = stream(1, 0);
        for n in 1..50 {
            for _ in 0..20 {
                assert!(rng.below(n) < n);
            }
        }
        let u = rng.unit();
        assert!((0.0..1.0).contains(&u));
    }
}
