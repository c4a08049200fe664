use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use crate::scalar::Scalar;

/// Seeded generator backed by ChaCha8, whose output stream is fixed by the
/// algorithm and identical on every platform.
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent generator for a numbered sub-stream of `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng(inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.gen()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.0.gen::<f64>()
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.0.gen::<f64>() < p
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        xs.shuffle(&mut self.0);
    }

    pub fn choose<'a, X>(&mut self, xs: &'a [X]) -> Option<&'a X> {
        xs.choose(&mut self.0)
    }
}

/// Glorot/Xavier uniform: entries drawn from `U(−a, a)` with
/// `a = sqrt(6 / (rows + cols))`.
pub fn glorot_init<T: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::lit(rng.uniform(-a, a))).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches by construction")
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 − rate)`.
pub fn dropout_mask<T: Scalar>(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Matrix<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    let data = (0..rows * cols)
        .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a: Matrix<f64> = glorot_init(4, 4, &mut Rng::new(7));
        let b: Matrix<f64> = glorot_init(4, 4, &mut Rng::new(7));
        assert_eq!(a, b);
    }

    #[test]
    fn glorot_bound() {
        let bound = (6.0f64 / 8.0).sqrt();
        let a: Matrix<f64> = glorot_init(4, 4, &mut Rng::new(7));
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn glorot_mean_within_three_sigma() {
        // U(−a, a) has variance a²/3; the mean of N draws has σ = a/sqrt(3N)
        let n = 100_000;
        let m: Matrix<f64> = glorot_init(1, n, &mut Rng::new(2024));
        let a = (6.0 / (1 + n) as f64).sqrt();
        let sigma = a / (3.0 * n as f64).sqrt();
        let mean = m.sum() / n as f64;
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} sigma {sigma}");
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a = Rng::stream(5, 1).next_u64();
        let b = Rng::stream(5, 2).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, Rng::stream(5, 1).next_u64());
    }

    #[test]
    fn dropout_mask_values() {
        let m: Matrix<f64> = dropout_mask(10, 10, 0.5, &mut Rng::new(1));
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let m2: Matrix<f64> = dropout_mask(10, 10, 0.5, &mut Rng::new(1));
        assert_eq!(m, m2);
    }
}
