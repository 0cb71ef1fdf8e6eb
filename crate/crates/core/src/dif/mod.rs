//! Discretely indexed flow layers and stacks.
//!
//! A [`DifLayer`] holds `K` invertible maps `T_k` and a weight network
//! `w_k(z)`. Given a latent point `z`, the backward transport picks
//! `k ~ Categorical(w(z))` and returns `T_k^{-1}(z)`; the marginal density is
//!
//! ```text
//! psi(x) = sum_k w_k(T_k(x)) q(T_k(x)) |det J_{T_k}(x)|
//! ```
//!
//! A [`DifStack`] composes layers; `layers[0]` is closest to the data and the
//! last layer feeds from the standard normal prior. Coupling layers take part
//! as single-component layers, so the density recursion is the same for both
//! kinds.
//!
//! Batched evaluation keeps a fixed row layout: for an `n x d` input and a
//! layer with `K` components, expanded rows are point-major, i.e. row
//! `i * K + k` holds component `k` of point `i`.

mod cascade;
mod conditional;
mod model;
mod sampling;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffable::{with_bind, Bind, ParameterStore, Tensor, Var};
use crate::error::{DifError, Result};
use crate::maps::{AffineCouplingMap, DiagonalAffineMap, Diffeomorphism, COUPLING_HIDDEN};
use crate::weightnet::{WeightNetConfig, WeightNetwork};

pub use cascade::{expand_cascade, ExpandedCascade};
pub use conditional::ConditionalDifLayer;
pub use model::{ConditionalModel, LayerSpec, Model, ModelFile, SavedModel, MODEL_VERSION};
pub use sampling::SampleOutput;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Rows per tape when evaluating large batches without gradients.
pub(crate) const EVAL_CHUNK: usize = 4096;

/// A log-density that can be recorded on the tape, differentiable with
/// respect to its input points. Returns an `n x 1` column.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<Var<'a>>;
}

/// Evaluates a parameter-free [`LogDensity`] at each row of `x`.
pub fn log_density_points<L: LogDensity + ?Sized>(target: &L, x: &Tensor) -> Result<Vec<f64>> {
    let empty = ParameterStore::new();
    let mut out = Vec::with_capacity(x.rows());
    for start in (0..x.rows()).step_by(EVAL_CHUNK.max(1)) {
        let end = (start + EVAL_CHUNK).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let chunk = x.select_rows(&idx);
        out.extend(with_bind(&empty, |b| {
            Ok(target.log_density(b, b.constant(chunk))?.to_tensor().into_data())
        })?);
    }
    Ok(out)
}

/// `log N(z; 0, I)` for each row.
pub fn standard_normal_log_pdf<'a>(z: Var<'a>) -> Var<'a> {
    let d = z.cols() as f64;
    z.square().sum_rows().scale(-0.5).add_scalar(-0.5 * d * LN_2PI)
}

pub fn standard_normal_log_pdf_point(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

/// Interface shared by every element of a stack: the `K` forward images of
/// each input row with their log-numerator terms, and the `K` inverse images
/// with their log-weights.
pub trait Transport: Sync {
    fn k(&self) -> usize;
    fn dim(&self) -> usize;

    /// For `x` (`n x d`): `(z, log_h)` where `z` is `(n K) x d` with row
    /// `i K + k` equal to `T_k(x_i)`, and `log_h` is `n x K` holding
    /// `log w_k(T_k(x_i)) + log|det J_{T_k}(x_i)|`.
    fn forward_all<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)>;

    /// For `z` (`n x d`): `(x, log_w, log_det_inv)` where `x` is `(n K) x d`
    /// with row `i K + k` equal to `T_k^{-1}(z_i)`, `log_w` is `n x K` holding
    /// `log w_k(z_i)`, and `log_det_inv` is `n x K` holding
    /// `log|det J_{T_k^{-1}}(z_i)|`.
    fn inverse_all<'a>(&self, bind: &Bind<'a>, z: Var<'a>) -> Result<(Var<'a>, Var<'a>, Var<'a>)>;
}

/// Reorders `K` stacked blocks of `n` rows (component-major) into
/// point-major order.
pub(crate) fn interleave<'a>(bind: &Bind<'a>, parts: &[Var<'a>]) -> Var<'a> {
    if parts.len() == 1 {
        return parts[0];
    }
    let k = parts.len();
    let n = parts[0].rows();
    let stacked = bind.tape().concat_rows(parts);
    let order: Vec<usize> = (0..n * k).map(|r| (r % k) * n + r / k).collect();
    stacked.select_rows(&order)
}

/// Picks entry `(i K + k, k)` of an `(n K) x K` matrix into an `n x K` one.
pub(crate) fn diagonal_blocks<'a>(m: Var<'a>, n: usize, k: usize) -> Var<'a> {
    let idx = (0..n * k).map(|r| r * k + r % k).collect();
    m.gather(idx, n, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifLayer {
    #[serde(rename = "K")]
    pub k: usize,
    pub dim: usize,
    pub maps: Vec<Diffeomorphism>,
    pub weightnet: WeightNetwork,
}

impl DifLayer {
    /// `K` identity location-scale maps and a fresh weight network.
    pub fn location_scale<R: Rng + ?Sized>(
        prefix: &str,
        dim: usize,
        k: usize,
        config: &WeightNetConfig,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(DifError::InvalidArgument(format!(
                "DIF layer needs K >= 1 and dim >= 1, got K={k}, dim={dim}"
            )));
        }
        let maps = (0..k)
            .map(|i| DiagonalAffineMap::new(&format!("{prefix}.map{i}"), dim, store).map(Into::into))
            .collect::<Result<Vec<_>>>()?;
        let weightnet = WeightNetwork::new(&format!("{prefix}.w"), dim, k, config, store, rng)?;
        Self::from_parts(maps, weightnet)
    }

    pub fn from_parts(maps: Vec<Diffeomorphism>, weightnet: WeightNetwork) -> Result<Self> {
        let k = maps.len();
        if k == 0 {
            return Err(DifError::InvalidArgument("DIF layer needs K >= 1".into()));
        }
        let dim = maps[0].dim();
        if let Some(bad) = maps.iter().find(|m| m.dim() != dim) {
            return Err(DifError::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        if weightnet.k != k {
            return Err(DifError::DimensionMismatch {
                expected: k,
                got: weightnet.k,
            });
        }
        if weightnet.input_dim != dim {
            return Err(DifError::DimensionMismatch {
                expected: dim,
                got: weightnet.input_dim,
            });
        }
        Ok(Self {
            k,
            dim,
            maps,
            weightnet,
        })
    }

    /// The diagonal affine maps, if every component is one.
    pub fn affine_maps(&self) -> Option<Vec<&DiagonalAffineMap>> {
        self.maps
            .iter()
            .map(|m| match m {
                Diffeomorphism::DiagonalAffine(a) => Some(a),
                _ => None,
            })
            .collect()
    }

    /// Puts component locations at the given points (cycled if fewer than
    /// `K`) and resets log-scales to zero.
    pub fn init_locations(&self, store: &mut ParameterStore, points: &[Vec<f64>]) -> Result<()> {
        let maps = self.affine_maps().ok_or_else(|| {
            DifError::InvalidArgument("location init needs diagonal affine maps".into())
        })?;
        if points.is_empty() {
            return Err(DifError::InvalidArgument("no points to initialize from".into()));
        }
        for (i, m) in maps.iter().enumerate() {
            let p = &points[i % points.len()];
            m.set(store, p, &vec![0.0; self.dim])?;
        }
        Ok(())
    }
}

impl Transport for DifLayer {
    fn k(&self) -> usize {
        self.k
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn forward_all<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let n = x.rows();
        let mut zs = Vec::with_capacity(self.k);
        let mut lds = Vec::with_capacity(self.k);
        for m in &self.maps {
            let (z, ld) = m.forward(bind, x)?;
            zs.push(z);
            lds.push(ld);
        }
        let z = interleave(bind, &zs);
        let ld = bind.tape().concat_cols(&lds);
        let lw = self.weightnet.log_weights(bind, z, None)?;
        let lw = if self.k == 1 { lw } else { diagonal_blocks(lw, n, self.k) };
        Ok((z, lw + ld))
    }

    fn inverse_all<'a>(&self, bind: &Bind<'a>, z: Var<'a>) -> Result<(Var<'a>, Var<'a>, Var<'a>)> {
        let mut xs = Vec::with_capacity(self.k);
        let mut lds = Vec::with_capacity(self.k);
        for m in &self.maps {
            let (x, ld) = m.inverse(bind, z)?;
            xs.push(x);
            lds.push(ld);
        }
        let lw = self.weightnet.log_weights(bind, z, None)?;
        Ok((interleave(bind, &xs), lw, bind.tape().concat_cols(&lds)))
    }
}

impl Transport for AffineCouplingMap {
    fn k(&self) -> usize {
        1
    }

    fn dim(&self) -> usize {
        AffineCouplingMap::dim(self)
    }

    fn forward_all<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        let map = Diffeomorphism::AffineCoupling(self.clone());
        map.forward(bind, x)
    }

    fn inverse_all<'a>(&self, bind: &Bind<'a>, z: Var<'a>) -> Result<(Var<'a>, Var<'a>, Var<'a>)> {
        let map = Diffeomorphism::AffineCoupling(self.clone());
        let (x, ld) = map.inverse(bind, z)?;
        let lw = bind.constant(Tensor::zeros(z.rows(), 1));
        Ok((x, lw, ld))
    }
}

/// One element of a stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dif(DifLayer),
    Coupling(AffineCouplingMap),
}

impl Layer {
    pub fn as_dif(&self) -> Option<&DifLayer> {
        match self {
            Layer::Dif(l) => Some(l),
            Layer::Coupling(_) => None,
        }
    }

    fn transport(&self) -> &dyn Transport {
        match self {
            Layer::Dif(l) => l,
            Layer::Coupling(c) => c,
        }
    }
}

impl Transport for Layer {
    fn k(&self) -> usize {
        self.transport().k()
    }

    fn dim(&self) -> usize {
        self.transport().dim()
    }

    fn forward_all<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        self.transport().forward_all(bind, x)
    }

    fn inverse_all<'a>(&self, bind: &Bind<'a>, z: Var<'a>) -> Result<(Var<'a>, Var<'a>, Var<'a>)> {
        self.transport().inverse_all(bind, z)
    }
}

/// `log psi` of a chain of transports over the standard normal prior, for
/// each row of `x`.
pub fn chain_log_density<'a, T: Transport + ?Sized>(
    bind: &Bind<'a>,
    layers: &[&T],
    x: Var<'a>,
) -> Result<Var<'a>> {
    let Some((first, rest)) = layers.split_first() else {
        return Ok(standard_normal_log_pdf(x));
    };
    let n = x.rows();
    let k = first.k();
    let (z, log_h) = first.forward_all(bind, x)?;
    let inner = chain_log_density(bind, rest, z)?;
    let terms = log_h + inner.reshape(n, k);
    Ok(if k == 1 { terms } else { terms.logsumexp_rows() })
}

/// `log h_k(x) = log w_k(T_k x) + log|det J_{T_k}(x)| + log psi_rest(T_k x)`
/// for the components of `first`, with `rest` supplying the density its
/// outputs are scored under. `n x K`.
pub fn component_log_terms<'a, T: Transport + ?Sized>(
    bind: &Bind<'a>,
    first: &T,
    rest: &[&dyn Transport],
    x: Var<'a>,
) -> Result<Var<'a>> {
    let n = x.rows();
    let (z, log_h) = first.forward_all(bind, x)?;
    let inner = chain_log_density(bind, rest, z)?;
    Ok(log_h + inner.reshape(n, first.k()))
}

/// Ordered layers over a standard normal prior. `layers[0]` touches the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifStack {
    pub dim: usize,
    pub layers: Vec<Layer>,
}

impl DifStack {
    pub fn new(dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if let Some(bad) = layers.iter().find(|l| l.dim() != dim) {
            return Err(DifError::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Self { dim, layers })
    }

    pub fn single(layer: DifLayer) -> Self {
        Self {
            dim: layer.dim,
            layers: vec![Layer::Dif(layer)],
        }
    }

    /// Number of components of the equivalent single layer.
    pub fn total_components(&self) -> usize {
        self.layers.iter().map(Transport::k).product()
    }

    pub fn transports(&self) -> Vec<&dyn Transport> {
        self.layers.iter().map(|l| l as &dyn Transport).collect()
    }

    /// `log psi(x)` on the tape, `n x 1`.
    pub fn log_density<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<Var<'a>> {
        if x.cols() != self.dim {
            return Err(DifError::DimensionMismatch {
                expected: self.dim,
                got: x.cols(),
            });
        }
        chain_log_density(bind, &self.transports(), x)
    }

    /// `log v_k(x)` of the first layer (the rest of the stack acting as its
    /// prior), `n x K`.
    pub fn forward_log_weights<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let terms = self.first_layer_terms(bind, x)?;
        let log_psi = terms.logsumexp_rows();
        Ok(terms - log_psi)
    }

    /// `log h_k(x) = log w_k(T_k x) + log psi_rest(T_k x) + log|det J_{T_k}(x)|`
    /// for the first layer, `n x K`.
    pub fn first_layer_terms<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let (first, rest) = self.split_first()?;
        let rest: Vec<&dyn Transport> = rest.iter().map(|l| l as &dyn Transport).collect();
        component_log_terms(bind, first, &rest, x)
    }

    fn split_first(&self) -> Result<(&Layer, &[Layer])> {
        self.layers
            .split_first()
            .ok_or_else(|| DifError::InvalidArgument("stack has no layers".into()))
    }

    /// `log psi` at every row of `x`, evaluated in chunks without gradients.
    pub fn log_density_batch(&self, store: &ParameterStore, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.dim {
            return Err(DifError::DimensionMismatch {
                expected: self.dim,
                got: x.cols(),
            });
        }
        if !x.all_finite() {
            return Err(DifError::NonFinite("density input".into()));
        }
        let chunk = (EVAL_CHUNK / self.total_components().max(1)).max(64);
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(chunk) {
            let end = (start + chunk).min(x.rows());
            let rows: Vec<usize> = (start..end).collect();
            let part = x.select_rows(&rows);
            out.extend(with_bind(store, |b| {
                Ok(self.log_density(b, b.constant(part))?.to_tensor().into_data())
            })?);
        }
        if let Some(bad) = out.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
            return Err(DifError::NonFinite(format!("log density evaluated to {bad}")));
        }
        Ok(out)
    }

    pub fn log_density_at(&self, store: &ParameterStore, x: &[f64]) -> Result<f64> {
        Ok(self.log_density_batch(store, &Tensor::row(x))?[0])
    }

    /// `log v_k(x)` at a single point.
    pub fn forward_log_weights_at(&self, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DifError::NonFinite("forward weight input".into()));
        }
        with_bind(store, |b| {
            Ok(self
                .forward_log_weights(b, b.constant(Tensor::row(x)))?
                .to_tensor()
                .into_data())
        })
    }

    /// `log phi(z) = log sum_k v_k(T_k^{-1} z) p(T_k^{-1} z) |det J_{T_k^{-1}}(z)|`:
    /// the density obtained by pushing `p` through the forward transport of
    /// the first layer. `n x 1`.
    pub fn phi_log_density<'a, P: LogDensity + ?Sized>(
        &self,
        bind: &Bind<'a>,
        log_p: &P,
        z: Var<'a>,
    ) -> Result<Var<'a>> {
        let (first, _) = self.split_first()?;
        let n = z.rows();
        let k = first.k();
        let (x, _, ld_inv) = first.inverse_all(bind, z)?;
        // v at each preimage: (n K) x K, keep column k for row i K + k
        let log_v = self.forward_log_weights(bind, x)?;
        let log_v = if k == 1 { log_v } else { diagonal_blocks(log_v, n, k) };
        let lp = log_p.log_density(bind, x)?.reshape(n, k);
        let terms = log_v + lp + ld_inv;
        Ok(if k == 1 { terms } else { terms.logsumexp_rows() })
    }

    pub fn phi_log_density_at<P: LogDensity + ?Sized>(
        &self,
        store: &ParameterStore,
        log_p: &P,
        z: &[f64],
    ) -> Result<f64> {
        with_bind(store, |b| {
            Ok(self.phi_log_density(b, log_p, b.constant(Tensor::row(z)))?.item())
        })
    }
}

/// Builds stacks layer by layer, data side first.
pub struct StackBuilder<'s, R: Rng + ?Sized> {
    dim: usize,
    layers: Vec<Layer>,
    store: &'s mut ParameterStore,
    rng: &'s mut R,
    couplings: usize,
}

impl<'s, R: Rng + ?Sized> StackBuilder<'s, R> {
    pub fn new(dim: usize, store: &'s mut ParameterStore, rng: &'s mut R) -> Self {
        Self {
            dim,
            layers: Vec::new(),
            store,
            rng,
            couplings: 0,
        }
    }

    pub fn dif(mut self, k: usize, config: &WeightNetConfig) -> Result<Self> {
        let prefix = format!("l{}", self.layers.len());
        let layer = DifLayer::location_scale(&prefix, self.dim, k, config, self.store, self.rng)?;
        self.layers.push(Layer::Dif(layer));
        Ok(self)
    }

    /// Coupling layer with alternating masks across successive couplings.
    pub fn coupling(mut self, hidden: Option<&[usize]>) -> Result<Self> {
        let prefix = format!("l{}", self.layers.len());
        let mask = AffineCouplingMap::alternating_mask(self.dim, self.couplings);
        let hidden = hidden.unwrap_or(&COUPLING_HIDDEN);
        let c = AffineCouplingMap::new(&prefix, mask, hidden, self.store, self.rng)?;
        self.couplings += 1;
        self.layers.push(Layer::Coupling(c));
        Ok(self)
    }

    pub fn build(self) -> Result<DifStack> {
        DifStack::new(self.dim, self.layers)
    }
}

#[cfg(test)]
mod tests;
