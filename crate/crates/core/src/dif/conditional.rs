use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{diagonal_blocks, interleave, standard_normal_log_pdf, EVAL_CHUNK};
use crate::diffable::{with_bind, Bind, ParameterStore, Tensor, Var};
use crate::error::{DifError, Result};
use crate::nn::{Activation, Mlp, OutputInit};
use crate::rng::{categorical_from_logs, standard_normal};
use crate::weightnet::{WeightNetConfig, WeightNetwork};

/// A DIF layer whose weights read `(z, omega)` and whose diagonal affine maps
/// take `mu_k(omega)` and `log s_k(omega)` from a covariate network. For a
/// fixed `omega` it is an ordinary layer; invertibility is only required in
/// `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDifLayer {
    #[serde(rename = "K")]
    pub k: usize,
    pub dim: usize,
    pub covariate_dim: usize,
    /// `omega -> [mu_1 .. mu_K, log s_1 .. log s_K]`, each block of width `d`.
    pub covariate_net: Mlp,
    pub weightnet: WeightNetwork,
}

/// Location and log-scale batches for each component.
type MapParams<'a> = Vec<(Var<'a>, Var<'a>)>;

impl ConditionalDifLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        dim: usize,
        covariate_dim: usize,
        k: usize,
        weight_config: &WeightNetConfig,
        covariate_hidden: &[usize],
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || dim == 0 || covariate_dim == 0 {
            return Err(DifError::InvalidArgument(format!(
                "conditional layer needs positive K, dim and covariate dim; got {k}, {dim}, {covariate_dim}"
            )));
        }
        let widths: Vec<usize> = std::iter::once(covariate_dim)
            .chain(covariate_hidden.iter().copied())
            .chain(std::iter::once(2 * k * dim))
            .collect();
        let covariate_net = Mlp::new(
            &format!("{prefix}.cov"),
            &widths,
            Activation::Tanh,
            OutputInit::Zero,
            store,
            rng,
        )?;
        let weightnet = WeightNetwork::conditional(
            &format!("{prefix}.w"),
            dim,
            covariate_dim,
            k,
            weight_config,
            store,
            rng,
        )?;
        Ok(Self {
            k,
            dim,
            covariate_dim,
            covariate_net,
            weightnet,
        })
    }

    fn map_params<'a>(&self, bind: &Bind<'a>, omega: Var<'a>) -> Result<MapParams<'a>> {
        let out = self.covariate_net.forward(bind, omega)?;
        let d = self.dim;
        Ok((0..self.k)
            .map(|k| {
                let loc: Vec<usize> = (k * d..(k + 1) * d).collect();
                let ls: Vec<usize> = loc.iter().map(|c| c + self.k * d).collect();
                (out.select_cols(&loc), out.select_cols(&ls))
            })
            .collect())
    }

    fn check(&self, x: Var<'_>, omega: Var<'_>) -> Result<()> {
        if x.cols() != self.dim {
            return Err(DifError::DimensionMismatch {
                expected: self.dim,
                got: x.cols(),
            });
        }
        if omega.cols() != self.covariate_dim {
            return Err(DifError::DimensionMismatch {
                expected: self.covariate_dim,
                got: omega.cols(),
            });
        }
        if omega.rows() != x.rows() {
            return Err(DifError::DimensionMismatch {
                expected: x.rows(),
                got: omega.rows(),
            });
        }
        Ok(())
    }

    /// `log w_k(T_k(x; omega); omega) + log q(T_k(x; omega)) + log|det J|`, `n x K`.
    pub fn terms<'a>(&self, bind: &Bind<'a>, x: Var<'a>, omega: Var<'a>) -> Result<Var<'a>> {
        self.check(x, omega)?;
        let n = x.rows();
        let params = self.map_params(bind, omega)?;
        let mut zs = Vec::with_capacity(self.k);
        let mut lds = Vec::with_capacity(self.k);
        for (loc, ls) in params {
            zs.push((x - loc) * (-ls).exp());
            lds.push(-ls.sum_rows());
        }
        let z = interleave(bind, &zs);
        let om = if self.k == 1 {
            omega
        } else {
            let rep: Vec<usize> = (0..n * self.k).map(|r| r / self.k).collect();
            omega.select_rows(&rep)
        };
        let lw = self.weightnet.log_weights(bind, z, Some(om))?;
        let lw = if self.k == 1 { lw } else { diagonal_blocks(lw, n, self.k) };
        let lq = standard_normal_log_pdf(z).reshape(n, self.k);
        Ok(lw + lq + bind.tape().concat_cols(&lds))
    }

    /// `log psi(x | omega)`, `n x 1`.
    pub fn log_density<'a>(&self, bind: &Bind<'a>, x: Var<'a>, omega: Var<'a>) -> Result<Var<'a>> {
        let t = self.terms(bind, x, omega)?;
        Ok(if self.k == 1 { t } else { t.logsumexp_rows() })
    }

    pub fn log_density_batch(&self, store: &ParameterStore, x: &Tensor, omega: &Tensor) -> Result<Vec<f64>> {
        if !x.all_finite() || !omega.all_finite() {
            return Err(DifError::NonFinite("conditional density input".into()));
        }
        if x.rows() != omega.rows() {
            return Err(DifError::DimensionMismatch {
                expected: x.rows(),
                got: omega.rows(),
            });
        }
        let chunk = (EVAL_CHUNK / self.k).max(64);
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(chunk) {
            let rows: Vec<usize> = (start..(start + chunk).min(x.rows())).collect();
            let (xc, oc) = (x.select_rows(&rows), omega.select_rows(&rows));
            out.extend(with_bind(store, |b| {
                Ok(self
                    .log_density(b, b.constant(xc), b.constant(oc))?
                    .to_tensor()
                    .into_data())
            })?);
        }
        Ok(out)
    }

    pub fn log_density_at(&self, store: &ParameterStore, x: &[f64], omega: &[f64]) -> Result<f64> {
        Ok(self.log_density_batch(store, &Tensor::row(x), &Tensor::row(omega))?[0])
    }

    /// One draw of `x | omega` per covariate row.
    pub fn sample<R: Rng + ?Sized>(&self, store: &ParameterStore, omega: &Tensor, rng: &mut R) -> Result<Tensor> {
        if omega.cols() != self.covariate_dim {
            return Err(DifError::DimensionMismatch {
                expected: self.covariate_dim,
                got: omega.cols(),
            });
        }
        let n = omega.rows();
        let z = standard_normal(rng, n, self.dim);
        let (lw, params) = with_bind(store, |b| {
            let om = b.constant(omega.clone());
            let lw = self.weightnet.log_weights(b, b.constant(z.clone()), Some(om))?;
            let params: Vec<(Tensor, Tensor)> = self
                .map_params(b, om)?
                .into_iter()
                .map(|(l, s)| (l.to_tensor(), s.to_tensor()))
                .collect();
            Ok((lw.to_tensor(), params))
        })?;
        let mut out = Vec::with_capacity(n * self.dim);
        for i in 0..n {
            let u = if self.k == 1 { 0 } else { categorical_from_logs(rng, lw.row_slice(i)) };
            let (loc, ls) = &params[u];
            for j in 0..self.dim {
                out.push(loc.get(i, j) + ls.get(i, j).exp() * z.get(i, j));
            }
        }
        Ok(Tensor::new(n, self.dim, out))
    }
}
