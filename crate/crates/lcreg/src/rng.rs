//! Deterministic random number generation.
//!
//! The stream algorithm is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`),
//! which is specified independently of platform word size and endianness;
//! normal variates come from `rand_distr::StandardNormal`. One seed therefore
//! produces one draw sequence everywhere, for the crate versions pinned in
//! the lockfile.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: ChaCha8Rng,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng { seed, stream: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A child generator whose stream is independent of further draws from
    /// `self`. Used to give each subsystem (init, sampling, noise) its own
    /// stream so adding draws in one place never shifts another.
    pub fn fork(&mut self) -> Rng {
        let seed = self.stream.next_u64();
        Rng::seeded(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.stream.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.stream.gen::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.stream.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        self.stream.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.stream.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}
