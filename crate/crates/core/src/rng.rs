//! Seeded random streams.
//!
//! Every stochastic routine in the crate draws from a [`NoiseStream`], a
//! ChaCha8 generator addressed by `(seed, stream)`. Two streams with the same
//! seed but different stream ids are independent, which lets callers hand out
//! disjoint streams to corpus items or flow stages without coordinating.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Derive an independent child stream. The parent is advanced by one draw.
    pub fn split(&mut self, stream: u64) -> Self {
        let seed: u64 = self.rng.random();
        Self::with_stream(seed, stream)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    /// Zero-mean Laplace draw with scale `b`.
    pub fn laplace(&mut self, b: f64) -> f64 {
        // inverse CDF on (-1/2, 1/2)
        let u: f64 = self.uniform() - 0.5;
        let mag = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
        -b * u.signum() * mag.ln()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}
