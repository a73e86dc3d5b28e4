//! Reproducible random numbers.
//!
//! A thin wrapper over ChaCha8 (`rand_chacha`) that remembers its seed so
//! that independent child streams can be derived with [`Rng::fork`]. The
//! child seed is the first word of ChaCha8 stream `stream + 1` under the
//! parent seed. It depends only on the parent seed and the stream id, never
//! on how far the parent has advanced, so per-sample streams are identical
//! regardless of worker count or scheduling order.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Vec64;

#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator for stream `stream`; see the module docs for the rule.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(derive_seed(self.seed, stream))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..bound`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        self.inner.random_range(0..bound)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// `n` i.i.d. standard normal draws.
    pub fn gaussian_vec(&mut self, n: usize) -> Vec64 {
        assert!(n >= 1, "gaussian_vec needs n >= 1");
        Vec64::from((0..n).map(|_| self.normal()).collect::<Vec<_>>())
    }
}

/// Seed for stream `stream` of a parent seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    g.set_stream(stream.wrapping_add(1));
    g.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..8 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_ne!(Rng::new(42).next_u64(), Rng::new(43).next_u64());
    }

    #[test]
    fn gaussian_vec_is_deterministic() {
        let a = Rng::new(7).gaussian_vec(4);
        let b = Rng::new(7).gaussian_vec(4);
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_moments() {
        let v = Rng::new(2024).gaussian_vec(10_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!(var > 0.94 && var < 1.06, "var {var}");
    }

    #[test]
    fn chi_norm_concentrates() {
        let mut rng = Rng::new(3);
        let inside = (0..1000)
            .filter(|_| {
                let n = rng.gaussian_vec(100).norm();
                (8.0..=12.0).contains(&n)
            })
            .count();
        assert!(inside >= 990, "{inside}");
    }

    #[test]
    fn fork_ignores_parent_progress() {
        let parent = Rng::new(5);
        let mut advanced = parent.clone();
        advanced.next_u64();
        assert_eq!(parent.fork(3), advanced.fork(3));
        assert_ne!(parent.fork(3), parent.fork(4));
        assert_ne!(parent.fork(0).seed(), parent.seed());
    }

    #[test]
    fn uniform_range_bounds() {
        let mut rng = Rng::new(9);
        for _ in 0..1000 {
            let u = rng.uniform_range(-2.0, 3.0);
            assert!((-2.0..3.0).contains(&u));
        }
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = Rng::new(11);
        let mut seen = [0usize; 4];
        for _ in 0..4000 {
            seen[rng.below(4)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 850), "{seen:?}");
    }
}
