//! Seeded random streams.
//!
//! Every stochastic routine takes a `(seed, stream)` pair so that parallel or
//! repeated draws never share state and a run is reproducible from its seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffable::Tensor;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n x d` matrix of independent standard normal draws.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(n, d, data)
}

/// Inverse-CDF draw over a fixed component order from unnormalized
/// log-probabilities, using a single uniform.
pub fn categorical_from_logs<R: Rng + ?Sized>(rng: &mut R, log_probs: &[f64]) -> usize {
    let m = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = log_probs.iter().map(|l| (l - m).exp()).collect();
    categorical(rng, &probs)
}

/// Inverse-CDF draw from non-negative, not necessarily normalized weights.
pub fn categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last_positive = k;
        }
        acc += w;
        if u < acc {
            return k;
        }
    }
    last_positive
}
