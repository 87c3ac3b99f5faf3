//! Deterministic random draws.
//!
//! Backed by ChaCha8, a counter-based generator: identical seeds reproduce
//! identical streams on every platform this crate builds on.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix;

#[derive(Clone, Debug)]
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

    /// Independent generator for a named sub-stream of `seed`.
    ///
    /// Used to give each consumer (init, data order, dropout, noise) its own
    /// stream so adding draws in one place never perturbs another.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn gaussian(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.standard_normal())
    }

    pub fn uniform(&mut self, lo: f64, hi: f64, rows: usize, cols: usize) -> Matrix {
        assert!(lo < hi, "uniform range [{lo}, {hi}) is empty");
        Matrix::from_fn(rows, cols, |_, _| self.inner.random_range(lo..hi))
    }

    /// Kaiming-uniform draw with bound `sqrt(6 / fan_in)`.
    pub fn kaiming_uniform(&mut self, fan_in: usize, rows: usize, cols: usize) -> Matrix {
        assert!(fan_in > 0, "fan_in must be positive");
        let bound = (6.0 / fan_in as f64).sqrt();
        self.uniform(-bound, bound, rows, cols)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, uniformly without replacement.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = Rng::new(42).gaussian(4, 5);
        let b = Rng::new(42).gaussian(4, 5);
        assert_eq!(a, b);
        let c = Rng::new(43).gaussian(4, 5);
        assert_ne!(a, c);
    }

    #[test]
    fn derived_streams_differ() {
        let a = Rng::derive(42, 1).gaussian(2, 2);
        let b = Rng::derive(42, 2).gaussian(2, 2);
        assert_ne!(a, b);
        assert_eq!(a, Rng::derive(42, 1).gaussian(2, 2));
    }

    #[test]
    fn gaussian_moments() {
        let m = Rng::new(123).gaussian(1000, 100);
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn kaiming_bound() {
        let m = Rng::new(1).kaiming_uniform(6, 50, 50);
        assert!(m.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        // symmetric about zero: both signs present
        assert!(m.as_slice().iter().any(|&v| v < -0.5));
        assert!(m.as_slice().iter().any(|&v| v > 0.5));
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..100).collect();
        Rng::new(9).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
