//! Simplex-valued weight functions `w_1(z), ..., w_K(z)`.
//!
//! A [`WeightNetwork`] is a `K`-label classifier: an MLP over the latent point
//! (optionally with covariates appended) followed by a softmax. Outputs are
//! returned in log space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffable::{with_bind, Bind, ParameterStore, Tensor, Var};
use crate::error::{DifError, Result};
use crate::nn::{Activation, Mlp, OutputInit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNetConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for WeightNetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNetwork {
    pub k: usize,
    pub input_dim: usize,
    /// Width of the covariate block appended after the latent coordinates.
    #[serde(default)]
    pub covariate_dim: usize,
    /// Absent when `k == 1`: the only weight is 1.
    pub net: Option<Mlp>,
}

impl WeightNetwork {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        input_dim: usize,
        k: usize,
        config: &WeightNetConfig,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        Self::conditional(prefix, input_dim, 0, k, config, store, rng)
    }

    pub fn conditional<R: Rng + ?Sized>(
        prefix: &str,
        input_dim: usize,
        covariate_dim: usize,
        k: usize,
        config: &WeightNetConfig,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(DifError::InvalidArgument("weight network needs K >= 1".into()));
        }
        let net = if k == 1 {
            None
        } else {
            let widths: Vec<usize> = std::iter::once(input_dim + covariate_dim)
                .chain(config.hidden.iter().copied())
                .chain(std::iter::once(k))
                .collect();
            Some(Mlp::new(
                prefix,
                &widths,
                config.activation,
                OutputInit::Glorot,
                store,
                rng,
            )?)
        };
        Ok(Self {
            k,
            input_dim,
            covariate_dim,
            net,
        })
    }

    /// `n x K` matrix of `log w_k(z)` for a batch `z` (`n x d`), with
    /// covariates `omega` (`n x p`) for conditional networks.
    pub fn log_weights<'a>(
        &self,
        bind: &Bind<'a>,
        z: Var<'a>,
        omega: Option<Var<'a>>,
    ) -> Result<Var<'a>> {
        let n = z.rows();
        let Some(net) = &self.net else {
            return Ok(bind.constant(Tensor::zeros(n, 1)));
        };
        let input = match (self.covariate_dim, omega) {
            (0, _) => z,
            (p, Some(w)) if w.cols() == p => bind.tape().concat_cols(&[z, w]),
            (p, Some(w)) => {
                return Err(DifError::DimensionMismatch {
                    expected: p,
                    got: w.cols(),
                })
            }
            (_, None) => {
                return Err(DifError::InvalidArgument(
                    "conditional weight network called without covariates".into(),
                ))
            }
        };
        Ok(net.forward(bind, input)?.log_softmax_rows())
    }

    /// `log w_k(z)` at a single point.
    pub fn log_weights_at(&self, store: &ParameterStore, z: &[f64], omega: Option<&[f64]>) -> Result<Vec<f64>> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(DifError::NonFinite("weight network input".into()));
        }
        with_bind(store, |b| {
            let zv = b.constant(Tensor::row(z));
            let wv = omega.map(|w| b.constant(Tensor::row(w)));
            Ok(self.log_weights(b, zv, wv)?.to_tensor().into_data())
        })
    }

    /// Zeroes the last weight matrix and sets its bias to `log alpha`, so the
    /// output is `alpha` for every input.
    pub fn init_for_mixture(&self, store: &mut ParameterStore, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.k {
            return Err(DifError::DimensionMismatch {
                expected: self.k,
                got: alpha.len(),
            });
        }
        if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(DifError::InvalidArgument(format!(
                "mixture weights must be strictly positive, got {bad}"
            )));
        }
        match &self.net {
            None => Ok(()),
            Some(net) => {
                let total: f64 = alpha.iter().sum();
                let logs: Vec<f64> = alpha.iter().map(|a| (a / total).ln()).collect();
                net.set_constant_output(store, &logs)
            }
        }
    }

    /// Name of the first-layer weight matrix (`n_1 x (d + p)`), if any.
    pub fn first_weight_name(&self) -> Option<String> {
        self.net.as_ref().map(|n| n.weight_name(0))
    }
}
