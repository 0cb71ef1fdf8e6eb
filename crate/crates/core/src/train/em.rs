use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dif::DifLayer;
use crate::diffable::{logsumexp, ParameterStore, Tensor};
use crate::error::{DifError, Result};
use crate::rng::{categorical, stream};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Responsibility mass under which a component is re-seeded.
const EMPTY_MASS: f64 = 1e-10;
/// Variances are kept above this fraction of the per-dimension data variance.
const VAR_FLOOR: f64 = 1e-9;
/// EM stops once the mean log-likelihood improves by less than this.
const EM_TOL: f64 = 1e-12;

/// Diagonal-covariance Gaussian mixture fitted by EM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Mean log-likelihood before each M-step, then once at the final
    /// parameters.
    pub loglik_trace: Vec<f64>,
}

impl GmmFit {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    fn component_terms(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let mut s = self.weights[k].ln();
                for (j, v) in x.iter().enumerate() {
                    let var = self.variances[k][j];
                    let d = v - self.means[k][j];
                    s += -0.5 * d * d / var - 0.5 * var.ln() - 0.5 * LN_2PI;
                }
                s
            })
            .collect()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        logsumexp(&self.component_terms(x))
    }

    pub fn mean_log_likelihood(&self, x: &Tensor) -> f64 {
        x.iter_rows().map(|r| self.log_pdf(r)).sum::<f64>() / x.rows() as f64
    }

    pub fn final_log_likelihood(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NAN)
    }
}

fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for r in x.iter_rows() {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in x.iter_rows() {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

/// k-means++ style seeding: each new center is a data point drawn with
/// probability proportional to its squared distance to the nearest center.
fn seed_means<R: Rng + ?Sized>(x: &Tensor, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centers = vec![x.row_slice(rng.random_range(0..n)).to_vec()];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    let mut d2: Vec<f64> = x.iter_rows().map(|r| dist(r, &centers[0])).collect();
    while centers.len() < k {
        let i = if d2.iter().sum::<f64>() > 0.0 {
            categorical(rng, &d2)
        } else {
            rng.random_range(0..n)
        };
        let c = x.row_slice(i).to_vec();
        for (j, r) in x.iter_rows().enumerate() {
            d2[j] = d2[j].min(dist(r, &c));
        }
        centers.push(c);
    }
    centers
}

/// Expectation-maximization for a diagonal Gaussian mixture.
pub fn gmm_em_fit(x: &Tensor, k: usize, iters: usize, seed: u64) -> Result<GmmFit> {
    let (n, d) = x.shape();
    if k == 0 {
        return Err(DifError::InvalidArgument("EM needs K >= 1".into()));
    }
    if n < k {
        return Err(DifError::InvalidArgument(format!("EM needs at least K={k} points, got {n}")));
    }
    if !x.all_finite() {
        return Err(DifError::NonFinite("EM data".into()));
    }
    let mut rng = stream(seed, 3);
    let (_, data_var) = column_stats(x);
    let floor: Vec<f64> = data_var.iter().map(|v| (v * VAR_FLOOR).max(f64::MIN_POSITIVE)).collect();
    let init_var: Vec<f64> = data_var.iter().zip(&floor).map(|(v, f)| v.max(*f)).collect();
    let mut fit = GmmFit {
        weights: vec![1.0 / k as f64; k],
        means: if k == 1 { vec![column_stats(x).0] } else { seed_means(x, k, &mut rng) },
        variances: vec![init_var.clone(); k],
        loglik_trace: Vec::new(),
    };
    let mut resp = vec![0.0; n * k];
    for _ in 0..iters {
        // E-step
        let mut ll = 0.0;
        for (i, r) in x.iter_rows().enumerate() {
            let t = fit.component_terms(r);
            let lse = logsumexp(&t);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (t[j] - lse).exp();
            }
        }
        ll /= n as f64;
        let prev = fit.loglik_trace.last().copied();
        fit.loglik_trace.push(ll);
        if let Some(p) = prev {
            if (ll - p).abs() < EM_TOL {
                return Ok(fit);
            }
        }
        // M-step
        for j in 0..k {
            let mass: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if mass < EMPTY_MASS {
                fit.means[j] = x.row_slice(rng.random_range(0..n)).to_vec();
                fit.variances[j] = init_var.clone();
                fit.weights[j] = 1.0 / n as f64;
                continue;
            }
            let mut mean = vec![0.0; d];
            for (i, r) in x.iter_rows().enumerate() {
                for c in 0..d {
                    mean[c] += resp[i * k + j] * r[c];
                }
            }
            mean.iter_mut().for_each(|m| *m /= mass);
            let mut var = vec![0.0; d];
            for (i, r) in x.iter_rows().enumerate() {
                for c in 0..d {
                    var[c] += resp[i * k + j] * (r[c] - mean[c]).powi(2);
                }
            }
            for c in 0..d {
                var[c] = (var[c] / mass).max(floor[c]);
            }
            fit.weights[j] = mass / n as f64;
            fit.means[j] = mean;
            fit.variances[j] = var;
        }
        let total: f64 = fit.weights.iter().sum();
        fit.weights.iter_mut().for_each(|w| *w /= total);
    }
    let ll = fit.mean_log_likelihood(x);
    fit.loglik_trace.push(ll);
    Ok(fit)
}

/// Sets a diagonal-affine layer so its density equals the mixture's:
/// constant weights `alpha`, `mu_k` and `log s_k = log(var_k) / 2`.
pub fn warm_start_from_gmm(layer: &DifLayer, store: &mut ParameterStore, gmm: &GmmFit) -> Result<()> {
    if layer.k != gmm.k() {
        return Err(DifError::DimensionMismatch {
            expected: layer.k,
            got: gmm.k(),
        });
    }
    let maps = layer
        .affine_maps()
        .ok_or_else(|| DifError::InvalidArgument("warm start needs diagonal affine maps".into()))?;
    for (k, m) in maps.iter().enumerate() {
        let ls: Vec<f64> = gmm.variances[k].iter().map(|v| 0.5 * v.ln()).collect();
        m.set(store, &gmm.means[k], &ls)?;
    }
    layer.weightnet.init_for_mixture(store, &gmm.weights)
}

/// Component locations at evenly spaced ranks of the data sorted by its
/// first coordinate; log-scales zero.
pub fn init_locations_from_data(layer: &DifLayer, store: &mut ParameterStore, x: &Tensor) -> Result<()> {
    if x.rows() == 0 {
        return Err(DifError::InvalidArgument("no data to initialize from".into()));
    }
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.sort_by(|a, b| x.get(*a, 0).total_cmp(&x.get(*b, 0)));
    let pts: Vec<Vec<f64>> = (0..layer.k)
        .map(|k| {
            let rank = (((k as f64 + 0.5) / layer.k as f64) * x.rows() as f64) as usize;
            x.row_slice(order[rank.min(x.rows() - 1)]).to_vec()
        })
        .collect();
    layer.init_locations(store, &pts)
}

/// Component locations at independent prior draws; log-scales zero.
pub fn init_locations_from_prior(layer: &DifLayer, store: &mut ParameterStore, seed: u64) -> Result<()> {
    let z = crate::rng::standard_normal(&mut stream(seed, 4), layer.k, layer.dim);
    layer.init_locations(store, &z.to_points())
}
