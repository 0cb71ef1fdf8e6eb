use rand::Rng;

use crate::dif::{log_density_points, DifStack, LogDensity};
use crate::diffable::{ParameterStore, Tensor};
use crate::error::{DifError, Result};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct SirResult {
    pub proposals: Tensor,
    /// `log p~(x_i) - log psi(x_i)`.
    pub log_weights: Vec<f64>,
    /// Self-normalized importance weights.
    pub normalized_weights: Vec<f64>,
    pub resampled: Tensor,
    /// `mean(p~ / psi)`, an unbiased estimate of the normalizing constant.
    pub z_estimate: f64,
    pub z_std_error: f64,
    pub effective_sample_size: f64,
}

impl SirResult {
    /// Self-normalized estimate of `E_P[f(X)]`.
    pub fn expectation<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.proposals
            .iter_rows()
            .zip(&self.normalized_weights)
            .map(|(x, w)| w * f(x))
            .sum()
    }
}

/// Sampling importance resampling with the model as proposal. Proposals use
/// stream 0 of `seed`, resampling stream 1.
pub fn sir_resample<P: LogDensity + ?Sized>(
    stack: &DifStack,
    store: &ParameterStore,
    log_p: &P,
    n_proposals: usize,
    n_out: usize,
    seed: u64,
) -> Result<SirResult> {
    if n_proposals == 0 || n_out > n_proposals {
        return Err(DifError::InvalidArgument(format!(
            "SIR needs 1 <= n_out <= n_proposals, got n_out={n_out}, n_proposals={n_proposals}"
        )));
    }
    let proposals = stack.sample_backward(store, n_proposals, seed, false)?.points;
    let log_q = stack.log_density_batch(store, &proposals)?;
    let log_p = log_density_points(log_p, &proposals)?;
    let log_weights: Vec<f64> = log_p.iter().zip(&log_q).map(|(p, q)| p - q).collect();
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(m > f64::NEG_INFINITY) || m.is_nan() {
        return Err(DifError::InvalidArgument(
            "all importance weights are zero: target and proposal supports are disjoint".into(),
        ));
    }
    let scaled: Vec<f64> = log_weights.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = scaled.iter().sum();
    let n = n_proposals as f64;
    let mean_scaled = sum / n;
    let var_scaled = scaled.iter().map(|w| (w - mean_scaled).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let normalized_weights: Vec<f64> = scaled.iter().map(|w| w / sum).collect();
    let ess = 1.0 / normalized_weights.iter().map(|w| w * w).sum::<f64>();

    let mut cumulative = Vec::with_capacity(n_proposals);
    let mut acc = 0.0;
    for w in &normalized_weights {
        acc += w;
        cumulative.push(acc);
    }
    let mut rng = stream(seed, 1);
    let picks: Vec<usize> = (0..n_out)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cumulative.partition_point(|c| *c <= u).min(n_proposals - 1)
        })
        .collect();
    Ok(SirResult {
        resampled: proposals.select_rows(&picks),
        proposals,
        log_weights,
        normalized_weights,
        z_estimate: m.exp() * mean_scaled,
        z_std_error: m.exp() * (var_scaled / n).sqrt(),
        effective_sample_size: ess,
    })
}
