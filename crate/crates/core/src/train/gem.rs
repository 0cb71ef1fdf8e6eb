use super::objectives::{accumulate, accumulate_value, chunk_points, frozen_log_weights, gem_surrogate, rows, GemMode};
use crate::dif::DifStack;
use crate::diffable::{ParameterStore, Tensor};
use crate::error::Result;

/// Halvings tried before a step is declared converged.
pub const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct GemStep {
    /// `g(theta_t) = sum_i log psi^{(theta_t)}(x_i)`.
    pub surrogate_before: f64,
    /// `g(theta_{t+1})`; equals `surrogate_before` when nothing moved.
    pub surrogate_after: f64,
    pub grad_norm: f64,
    /// Step size actually applied (0 when rejected).
    pub eta: f64,
    /// The line search ran out of halvings or the gradient vanished.
    pub converged: bool,
}

struct Surrogate<'s> {
    stack: &'s DifStack,
    mode: GemMode,
    x: &'s Tensor,
    frozen: Tensor,
    chunk: usize,
}

impl Surrogate<'_> {
    fn value_and_grad(&self, store: &ParameterStore) -> Result<(f64, Vec<f64>)> {
        accumulate(store, self.x.rows(), self.chunk, |b, r| {
            gem_surrogate(b, self.stack, self.mode, &rows(self.x, r.clone()), &rows(&self.frozen, r))
        })
    }

    fn value(&self, store: &ParameterStore) -> Result<f64> {
        accumulate_value(store, self.x.rows(), self.chunk, |b, r| {
            gem_surrogate(b, self.stack, self.mode, &rows(self.x, r.clone()), &rows(&self.frozen, r))
        })
    }
}

/// One generalized EM step: freeze `v` at `theta_t`, take
/// `theta_t + eta grad g`, and with `line_search` halve `eta` until the
/// surrogate does not decrease.
pub fn gem_step(
    stack: &DifStack,
    store: &mut ParameterStore,
    x: &Tensor,
    eta: f64,
    line_search: bool,
    mode: GemMode,
) -> Result<GemStep> {
    if !(eta > 0.0) {
        return Err(crate::DifError::InvalidArgument(format!("learning rate must be positive, got {eta}")));
    }
    let frozen = frozen_log_weights(store, stack, mode, x)?;
    let s = Surrogate {
        stack,
        mode,
        x,
        chunk: chunk_points(frozen.cols() * stack.total_components()),
        frozen,
    };
    let (g0, grad) = s.value_and_grad(store)?;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let unchanged = |converged| GemStep {
        surrogate_before: g0,
        surrogate_after: g0,
        grad_norm,
        eta: 0.0,
        converged,
    };
    if grad_norm == 0.0 {
        return Ok(unchanged(true));
    }
    let theta = store.values().to_vec();
    let mut step = eta;
    let tries = if line_search { MAX_HALVINGS + 1 } else { 1 };
    for _ in 0..tries {
        let proposal: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g).collect();
        store.set_values(&proposal)?;
        let g1 = match s.value(store) {
            Ok(v) => Some(v),
            Err(crate::DifError::NonFinite(_)) => None,
            Err(e) => {
                store.set_values(&theta)?;
                return Err(e);
            }
        };
        match g1 {
            Some(g1) if !line_search || g1 >= g0 => {
                return Ok(GemStep {
                    surrogate_before: g0,
                    surrogate_after: g1,
                    grad_norm,
                    eta: step,
                    converged: false,
                })
            }
            None if !line_search => {
                store.set_values(&theta)?;
                return Err(crate::DifError::NonFinite("surrogate after GEM step".into()));
            }
            _ => step *= 0.5,
        }
    }
    store.set_values(&theta)?;
    Ok(unchanged(true))
}
