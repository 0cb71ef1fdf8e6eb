//! Scalar objectives recorded on the tape.
//!
//! Each `*_sum` form returns the un-normalized sum over its batch so large
//! batches can be split into chunks whose gradients are added; the public
//! forms divide by the batch size where the definition is a mean.

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;

use crate::dif::{
    chain_log_density, component_log_terms, ConditionalDifLayer, DifStack, ExpandedCascade, Layer, LogDensity,
    Transport,
};
use crate::diffable::{value_and_grad, with_bind, Bind, ParameterStore, Tensor, Var};
use crate::error::{DifError, Result};
use crate::rng::categorical_from_logs;

/// Rows recorded on one tape when an objective is split into chunks.
const CHUNK_ROWS: usize = 4096;

pub(crate) fn chunk_points(rows_per_point: usize) -> usize {
    (CHUNK_ROWS / rows_per_point.max(1)).max(16)
}

fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect()
}

/// Sums value and gradient of `f` over consecutive row ranges of `0..n`.
/// Chunks are evaluated in parallel and reduced in chunk order.
pub(crate) fn accumulate<F>(store: &ParameterStore, n: usize, chunk: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'a> Fn(&Bind<'a>, Range<usize>) -> Result<Var<'a>> + Sync,
{
    let parts: Vec<(f64, Vec<f64>)> = chunk_ranges(n, chunk)
        .into_par_iter()
        .map(|range| {
            let p = crate::diffable::program(|b| f(b, range.clone()));
            value_and_grad(&p, store)
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad = vec![0.0; store.len()];
    for (v, g) in parts {
        total += v;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((total, grad))
}

/// Forward-only counterpart of [`accumulate`].
pub(crate) fn accumulate_value<F>(store: &ParameterStore, n: usize, chunk: usize, f: F) -> Result<f64>
where
    F: for<'a> Fn(&Bind<'a>, Range<usize>) -> Result<Var<'a>> + Sync,
{
    let parts: Vec<f64> = chunk_ranges(n, chunk)
        .into_par_iter()
        .map(|range| {
            let v = with_bind(store, |b| Ok(f(b, range)?.item()))?;
            if !v.is_finite() {
                return Err(DifError::NonFinite(format!("objective chunk evaluated to {v}")));
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

pub(crate) fn rows(x: &Tensor, range: Range<usize>) -> Tensor {
    x.select_rows(&range.collect::<Vec<_>>())
}

fn check_batch(x: &Tensor, dim: usize) -> Result<()> {
    if x.rows() == 0 {
        return Err(DifError::InvalidArgument("batch is empty".into()));
    }
    if x.cols() != dim {
        return Err(DifError::DimensionMismatch {
            expected: dim,
            got: x.cols(),
        });
    }
    if !x.all_finite() {
        return Err(DifError::NonFinite("batch".into()));
    }
    Ok(())
}

/// `-sum_i log psi(x_i)`.
pub fn mle_loss_sum<'a>(bind: &Bind<'a>, stack: &DifStack, x: &Tensor) -> Result<Var<'a>> {
    check_batch(x, stack.dim)?;
    Ok(-stack.log_density(bind, bind.constant(x.clone()))?.sum())
}

/// `-(1/M) sum_i log psi(x_i)`.
pub fn mle_loss<'a>(bind: &Bind<'a>, stack: &DifStack, x: &Tensor) -> Result<Var<'a>> {
    Ok(mle_loss_sum(bind, stack, x)?.scale(1.0 / x.rows() as f64))
}

/// Which latent index the surrogate marginalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GemMode {
    /// The first layer's index, with the rest of the stack as its prior.
    #[default]
    Layer,
    /// The joint index `(k0, k1)` of the first two layers.
    Cascade,
}

/// The element whose components the surrogate ranges over, and the layers
/// behind it.
fn gem_split(stack: &DifStack, mode: GemMode) -> Result<(Box<dyn Transport>, &[Layer])> {
    match mode {
        GemMode::Layer => {
            let (first, rest) = stack
                .layers
                .split_first()
                .ok_or_else(|| DifError::InvalidArgument("stack has no layers".into()))?;
            Ok((Box::new(first.clone()), rest))
        }
        GemMode::Cascade => {
            if stack.layers.len() < 2 {
                return Err(DifError::InvalidArgument("cascaded surrogate needs two layers".into()));
            }
            let pair = ExpandedCascade {
                outer: stack.layers[0].clone(),
                inner: stack.layers[1].clone(),
            };
            Ok((Box::new(pair), &stack.layers[2..]))
        }
    }
}

/// `log h_k(x)` for the surrogate's components, `n x K`.
pub fn gem_log_terms<'a>(bind: &Bind<'a>, stack: &DifStack, mode: GemMode, x: Var<'a>) -> Result<Var<'a>> {
    let (first, rest) = gem_split(stack, mode)?;
    let rest: Vec<&dyn Transport> = rest.iter().map(|l| l as &dyn Transport).collect();
    component_log_terms(bind, first.as_ref(), &rest, x)
}

/// `log v_k^{(theta_t)}(x_i)` at the current parameters, as constants.
pub fn frozen_log_weights(store: &ParameterStore, stack: &DifStack, mode: GemMode, x: &Tensor) -> Result<Tensor> {
    check_batch(x, stack.dim)?;
    let k = match mode {
        GemMode::Layer => stack.layers[0].k(),
        GemMode::Cascade => stack.layers.iter().take(2).map(Transport::k).product(),
    };
    let chunk = chunk_points(k * stack.total_components());
    let mut data = Vec::with_capacity(x.rows() * k);
    for start in (0..x.rows()).step_by(chunk) {
        let part = rows(x, start..(start + chunk).min(x.rows()));
        data.extend(with_bind(store, |b| {
            let t = gem_log_terms(b, stack, mode, b.constant(part))?;
            let lse = t.logsumexp_rows();
            Ok((t - lse).to_tensor().into_data())
        })?);
    }
    Ok(Tensor::new(x.rows(), k, data))
}

/// `g(theta) = sum_i sum_k v_k(x_i) [log h_k(x_i) - log v_k(x_i)]` with `v`
/// frozen. Entries with `v = 0` contribute nothing.
pub fn gem_surrogate<'a>(
    bind: &Bind<'a>,
    stack: &DifStack,
    mode: GemMode,
    x: &Tensor,
    frozen: &Tensor,
) -> Result<Var<'a>> {
    check_batch(x, stack.dim)?;
    if frozen.rows() != x.rows() {
        return Err(DifError::DimensionMismatch {
            expected: x.rows(),
            got: frozen.rows(),
        });
    }
    let terms = gem_log_terms(bind, stack, mode, bind.constant(x.clone()))?;
    if terms.cols() != frozen.cols() {
        return Err(DifError::DimensionMismatch {
            expected: terms.cols(),
            got: frozen.cols(),
        });
    }
    let mut idx = Vec::new();
    let mut v = Vec::new();
    let mut entropy = 0.0;
    for (i, lv) in frozen.data().iter().enumerate() {
        let w = lv.exp();
        if w > 0.0 {
            idx.push(i);
            v.push(w);
            entropy += w * lv;
        }
    }
    let m = idx.len();
    let picked = terms.gather(idx, 1, m);
    Ok((picked * bind.constant(Tensor::new(1, m, v))).sum().add_scalar(-entropy))
}

/// `sum_i sum_path w_path(z_i) [log psi(x_path) - log p(x_path)]`: every
/// component path from the prior side back to data space is expanded and
/// weighted by the product of its backward weights.
pub fn rb_kl_sum<'a, P: LogDensity + ?Sized>(
    bind: &Bind<'a>,
    layers: &[&dyn Transport],
    log_p: &P,
    z: &Tensor,
) -> Result<Var<'a>> {
    let dim = layers.first().map(|l| l.dim()).unwrap_or(z.cols());
    check_batch(z, dim)?;
    let mut pts = bind.constant(z.clone());
    let mut log_w = bind.constant(Tensor::zeros(z.rows(), 1));
    for layer in layers.iter().rev() {
        let r = pts.rows();
        let (x, lw, _) = layer.inverse_all(bind, pts)?;
        log_w = (log_w + lw).reshape(r * layer.k(), 1);
        pts = x;
    }
    let j = chain_log_density(bind, layers, pts)? - log_p.log_density(bind, pts)?;
    Ok((log_w.exp() * j).sum())
}

/// Rao-Blackwellized reverse-KL estimate over a stack (any mix of DIF and
/// coupling layers).
pub fn rb_kl_loss<'a, P: LogDensity + ?Sized>(
    bind: &Bind<'a>,
    stack: &DifStack,
    log_p: &P,
    z: &Tensor,
) -> Result<Var<'a>> {
    Ok(rb_kl_sum(bind, &stack.transports(), log_p, z)?.scale(1.0 / z.rows() as f64))
}

/// Doubly marginalized estimate for a two-layer stack.
pub fn rb_kl_loss_cascaded<'a, P: LogDensity + ?Sized>(
    bind: &Bind<'a>,
    stack: &DifStack,
    log_p: &P,
    z: &Tensor,
) -> Result<Var<'a>> {
    if stack.layers.len() != 2 {
        return Err(DifError::InvalidArgument(format!(
            "cascaded estimator needs two layers, got {}",
            stack.layers.len()
        )));
    }
    rb_kl_loss(bind, stack, log_p, z)
}

/// The same estimate on any single transport (e.g. an expanded cascade).
pub fn rb_kl_loss_transport<'a, P: LogDensity + ?Sized>(
    bind: &Bind<'a>,
    layer: &dyn Transport,
    log_p: &P,
    z: &Tensor,
) -> Result<Var<'a>> {
    Ok(rb_kl_sum(bind, &[layer], log_p, z)?.scale(1.0 / z.rows() as f64))
}

/// Plain Monte Carlo estimate: one sampled component path per `z_i`.
pub fn crude_kl_estimate<P: LogDensity + ?Sized, R: Rng + ?Sized>(
    stack: &DifStack,
    store: &ParameterStore,
    log_p: &P,
    z: &Tensor,
    rng: &mut R,
) -> Result<f64> {
    check_batch(z, stack.dim)?;
    let mut pts = z.clone();
    for layer in stack.layers.iter().rev() {
        let k = layer.k();
        let (x_all, lw) = with_bind(store, |b| {
            let (x, lw, _) = layer.inverse_all(b, b.constant(pts.clone()))?;
            Ok((x.to_tensor(), lw.to_tensor()))
        })?;
        let picks: Vec<usize> = (0..pts.rows())
            .map(|i| i * k + if k == 1 { 0 } else { categorical_from_logs(rng, lw.row_slice(i)) })
            .collect();
        pts = x_all.select_rows(&picks);
    }
    let total = with_bind(store, |b| {
        let x = b.constant(pts);
        Ok((stack.log_density(b, x)? - log_p.log_density(b, x)?).sum().item())
    })?;
    Ok(total / z.rows() as f64)
}

/// `-sum_i log psi(x_i | omega_i)`.
pub fn conditional_mle_loss_sum<'a>(
    bind: &Bind<'a>,
    layer: &ConditionalDifLayer,
    x: &Tensor,
    omega: &Tensor,
) -> Result<Var<'a>> {
    check_batch(x, layer.dim)?;
    check_batch(omega, layer.covariate_dim)?;
    Ok(-layer
        .log_density(bind, bind.constant(x.clone()), bind.constant(omega.clone()))?
        .sum())
}

/// `-(1/M) sum_i log psi(x_i | omega_i)`.
pub fn conditional_mle_loss<'a>(
    bind: &Bind<'a>,
    layer: &ConditionalDifLayer,
    x: &Tensor,
    omega: &Tensor,
) -> Result<Var<'a>> {
    Ok(conditional_mle_loss_sum(bind, layer, x, omega)?.scale(1.0 / x.rows() as f64))
}
