use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Deterministic random source.
///
/// Backed by ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), whose output
/// stream is fixed by its seed and stream number on every platform. Uniforms
/// take the top 53 bits of a `u64`; normals use the Box–Muller transform.
/// Box–Muller goes through the platform `ln`/`sin`/`cos`, so normals are
/// bit-stable on a given libm.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent generator for a numbered sub-stream of `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        Self::ALGORITHM
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller; the second variate is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal(&mut self, mean: f64, stddev: f64) -> f64 {
        mean + stddev * self.standard_normal()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, mean: f64, stddev: f64) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| self.normal(mean, stddev))
    }
}

/// Gaussian matrix fully determined by `(rows, cols, seed, mean, stddev)`.
pub fn seeded_gaussian(
    rows: usize,
    cols: usize,
    seed: u64,
    mean: f64,
    stddev: f64,
) -> Result<DenseMatrix> {
    if !(stddev.is_finite() && stddev >= 0.0) || !mean.is_finite() {
        return Err(Error::invalid(format!(
            "need finite mean and stddev >= 0, got mean={mean}, stddev={stddev}"
        )));
    }
    Ok(SeededRng::new(seed).gaussian_matrix(rows, cols, mean, stddev))
}
