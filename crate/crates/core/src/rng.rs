//! Seeded SplitMix64 streams. Every random decision in the crate goes
//! through here so a run is reproducible from its seed.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;

pub struct Rng(SplitMix64);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    /// Independent stream for a labelled sub-task of a seeded run.
    pub fn derive(seed: u64, stream: &[u64]) -> Self {
        let mut s = seed;
        for &tag in stream {
            let mut r = SplitMix64::seed_from_u64(s ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            s = r.next_u64();
        }
        Self::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `0..n` by modulo reduction.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform real in `[0, 1)` from the top 53 bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("finite std")
            .sample(&mut self.0)
    }

    /// Fisher–Yates shuffle driven by [`below`](Self::below).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..n`, in selection order: a partial
    /// Fisher–Yates where draw `i` swaps slot `i` with `i + below(n - i)`.
    pub fn choose_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        let count = count.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }
}
