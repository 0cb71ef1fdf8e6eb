//! Invertible maps `T` with forward, inverse and log-Jacobian evaluation.
//!
//! Maps only describe structure; their parameters live in a
//! [`ParameterStore`] under the map's prefix. All batch methods take an
//! `n x d` batch (one point per row) and return the mapped batch together
//! with an `n x 1` column of log-absolute Jacobian determinants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffable::{with_bind, Bind, ParameterStore, Tensor, Var};
use crate::error::{DifError, Result};
use crate::nn::{Activation, Mlp, OutputInit};

/// Bound on coupling log-scales, applied as `c * tanh(s / c)`.
pub const COUPLING_SCALE_CLAMP: f64 = 5.0;
pub const COUPLING_HIDDEN: [usize; 2] = [32, 32];

/// `T(x) = s^{-1} (x - mu)`, `T^{-1}(z) = mu + s z` with `s = exp(log_scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalAffineMap {
    pub prefix: String,
    pub dim: usize,
}

impl DiagonalAffineMap {
    /// Registers an identity map (`mu = 0`, `log s = 0`).
    pub fn new(prefix: &str, dim: usize, store: &mut ParameterStore) -> Result<Self> {
        let map = Self {
            prefix: prefix.to_string(),
            dim,
        };
        store.register_zeros(&map.loc_name(), &[dim])?;
        store.register_zeros(&map.log_scale_name(), &[dim])?;
        Ok(map)
    }

    pub fn loc_name(&self) -> String {
        format!("{}.loc", self.prefix)
    }

    pub fn log_scale_name(&self) -> String {
        format!("{}.log_scale", self.prefix)
    }

    pub fn set(&self, store: &mut ParameterStore, loc: &[f64], log_scale: &[f64]) -> Result<()> {
        store.set(&self.loc_name(), loc)?;
        store.set(&self.log_scale_name(), log_scale)
    }

    pub fn loc<'s>(&self, store: &'s ParameterStore) -> Result<&'s [f64]> {
        store.get(&self.loc_name())
    }

    pub fn log_scale<'s>(&self, store: &'s ParameterStore) -> Result<&'s [f64]> {
        store.get(&self.log_scale_name())
    }

    fn forward<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let loc = bind.param(&self.loc_name())?;
        let log_s = bind.param(&self.log_scale_name())?;
        let z = (x - loc) * (-log_s).exp();
        let ld = ones_column(bind, x.rows()) * (-log_s).sum_rows();
        Ok((z, ld))
    }

    fn inverse<'a>(&self, bind: &Bind<'a>, z: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let loc = bind.param(&self.loc_name())?;
        let log_s = bind.param(&self.log_scale_name())?;
        let x = loc + log_s.exp() * z;
        let ld = ones_column(bind, z.rows()) * log_s.sum_rows();
        Ok((x, ld))
    }
}

/// Real NVP affine coupling. Coordinates with `mask = 1` pass through and
/// condition the scale and shift of the others:
/// `z = m x + (1 - m)(x exp(s(m x)) + t(m x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCouplingMap {
    pub prefix: String,
    pub mask: Vec<bool>,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
}

impl AffineCouplingMap {
    /// Output layers start at zero, so a fresh coupling is the identity.
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        mask: Vec<bool>,
        hidden: &[usize],
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        let d = mask.len();
        if d == 0 {
            return Err(DifError::InvalidArgument("coupling mask is empty".into()));
        }
        if mask.iter().all(|&m| m) {
            return Err(DifError::InvalidArgument(
                "coupling mask leaves no coordinate to transform".into(),
            ));
        }
        let widths: Vec<usize> = std::iter::once(d)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(d))
            .collect();
        let scale_net = Mlp::new(
            &format!("{prefix}.scale"),
            &widths,
            Activation::Tanh,
            OutputInit::Zero,
            store,
            rng,
        )?;
        let shift_net = Mlp::new(
            &format!("{prefix}.shift"),
            &widths,
            Activation::Tanh,
            OutputInit::Zero,
            store,
            rng,
        )?;
        Ok(Self {
            prefix: prefix.to_string(),
            mask,
            scale_net,
            shift_net,
        })
    }

    /// Even coordinates condition when `parity` is 0, odd ones when it is 1.
    /// In one dimension the single coordinate is transformed.
    pub fn alternating_mask(dim: usize, parity: usize) -> Vec<bool> {
        if dim == 1 {
            return vec![false];
        }
        (0..dim).map(|j| j % 2 == parity % 2).collect()
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    fn mask_rows<'a>(&self, bind: &Bind<'a>) -> (Var<'a>, Var<'a>) {
        let keep: Vec<f64> = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let free: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        (
            bind.constant(Tensor::row(&keep)),
            bind.constant(Tensor::row(&free)),
        )
    }

    fn scale_shift<'a>(
        &self,
        bind: &Bind<'a>,
        conditioner: Var<'a>,
        free: Var<'a>,
    ) -> Result<(Var<'a>, Var<'a>)> {
        let c = COUPLING_SCALE_CLAMP;
        let raw = self.scale_net.forward(bind, conditioner)?;
        let s = raw.scale(1.0 / c).tanh().scale(c) * free;
        let t = self.shift_net.forward(bind, conditioner)? * free;
        Ok((s, t))
    }

    fn forward<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let (keep, free) = self.mask_rows(bind);
        let xk = x * keep;
        let (s, t) = self.scale_shift(bind, xk, free)?;
        let z = xk + free * (x * s.exp() + t);
        Ok((z, s.sum_rows()))
    }

    fn inverse<'a>(&self, bind: &Bind<'a>, z: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let (keep, free) = self.mask_rows(bind);
        let zk = z * keep;
        let (s, t) = self.scale_shift(bind, zk, free)?;
        let x = zk + free * ((z - t) * (-s).exp());
        Ok((x, -s.sum_rows()))
    }
}

/// `T = T_n o ... o T_1`: the first element is applied first in the forward
/// direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMap {
    pub maps: Vec<Diffeomorphism>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diffeomorphism {
    DiagonalAffine(DiagonalAffineMap),
    AffineCoupling(AffineCouplingMap),
    Chain(ChainMap),
}

impl From<DiagonalAffineMap> for Diffeomorphism {
    fn from(m: DiagonalAffineMap) -> Self {
        Self::DiagonalAffine(m)
    }
}

impl From<AffineCouplingMap> for Diffeomorphism {
    fn from(m: AffineCouplingMap) -> Self {
        Self::AffineCoupling(m)
    }
}

impl From<ChainMap> for Diffeomorphism {
    fn from(m: ChainMap) -> Self {
        Self::Chain(m)
    }
}

impl Diffeomorphism {
    pub fn dim(&self) -> usize {
        match self {
            Self::DiagonalAffine(m) => m.dim,
            Self::AffineCoupling(m) => m.dim(),
            Self::Chain(c) => c.maps.first().map_or(0, Diffeomorphism::dim),
        }
    }

    /// `(T(x), log|det J_T(x)|)` on the tape.
    pub fn forward<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        match self {
            Self::DiagonalAffine(m) => m.forward(bind, x),
            Self::AffineCoupling(m) => m.forward(bind, x),
            Self::Chain(c) => {
                let mut h = x;
                let mut total = zeros_column(bind, x.rows());
                for m in &c.maps {
                    let (next, ld) = m.forward(bind, h)?;
                    h = next;
                    total = total + ld;
                }
                Ok((h, total))
            }
        }
    }

    /// `(T^{-1}(z), log|det J_{T^{-1}}(z)|)` on the tape.
    pub fn inverse<'a>(&self, bind: &Bind<'a>, z: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        match self {
            Self::DiagonalAffine(m) => m.inverse(bind, z),
            Self::AffineCoupling(m) => m.inverse(bind, z),
            Self::Chain(c) => {
                let mut h = z;
                let mut total = zeros_column(bind, z.rows());
                for m in c.maps.iter().rev() {
                    let (next, ld) = m.inverse(bind, h)?;
                    h = next;
                    total = total + ld;
                }
                Ok((h, total))
            }
        }
    }

    pub fn forward_batch(&self, store: &ParameterStore, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.eval_batch(store, x, true)
    }

    pub fn inverse_batch(&self, store: &ParameterStore, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.eval_batch(store, z, false)
    }

    fn eval_batch(&self, store: &ParameterStore, x: &Tensor, forward: bool) -> Result<(Tensor, Vec<f64>)> {
        if !x.all_finite() {
            return Err(DifError::NonFinite("map input".into()));
        }
        if x.cols() != self.dim() {
            return Err(DifError::DimensionMismatch {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        with_bind(store, |b| {
            let input = b.constant(x.clone());
            let (y, ld) = if forward {
                self.forward(b, input)?
            } else {
                self.inverse(b, input)?
            };
            Ok((y.to_tensor(), ld.to_tensor().into_data()))
        })
    }

    pub fn forward_point(&self, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
        let (z, _) = self.forward_batch(store, &Tensor::row(x))?;
        Ok(z.into_data())
    }

    pub fn inverse_point(&self, store: &ParameterStore, z: &[f64]) -> Result<Vec<f64>> {
        let (x, _) = self.inverse_batch(store, &Tensor::row(z))?;
        Ok(x.into_data())
    }

    /// `log|det J_T(x)|` of the forward direction at `x`.
    pub fn log_abs_det_jacobian(&self, store: &ParameterStore, x: &[f64]) -> Result<f64> {
        let (_, ld) = self.forward_batch(store, &Tensor::row(x))?;
        Ok(ld[0])
    }
}

pub(crate) fn ones_column<'a>(bind: &Bind<'a>, n: usize) -> Var<'a> {
    bind.constant(Tensor::filled(n, 1, 1.0))
}

pub(crate) fn zeros_column<'a>(bind: &Bind<'a>, n: usize) -> Var<'a> {
    bind.constant(Tensor::zeros(n, 1))
}
