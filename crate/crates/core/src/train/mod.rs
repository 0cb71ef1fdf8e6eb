//! Objectives, optimizers and training loops.
//!
//! Density estimation maximizes the likelihood directly (`mle`, with an
//! adaptive-moment optimizer) or through the generalized EM surrogate
//! (`gem`, plain ascent with a line search that never lowers the
//! likelihood). Variational inference minimizes the Rao-Blackwellized
//! reverse-KL estimate (`rb_kl`) on fresh prior draws each step.

mod em;
mod gem;
mod objectives;
mod optim;
mod sir;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::dif::{ConditionalDifLayer, DifStack, LogDensity};
use crate::diffable::{ParameterStore, Tensor};
use crate::error::{DifError, Result};
use crate::rng::{standard_normal, stream, StreamRng};

pub use em::{gmm_em_fit, init_locations_from_data, init_locations_from_prior, warm_start_from_gmm, GmmFit};
pub use gem::{gem_step, GemStep, MAX_HALVINGS};
pub use objectives::{
    conditional_mle_loss, conditional_mle_loss_sum, crude_kl_estimate, frozen_log_weights, gem_log_terms,
    gem_surrogate, mle_loss, mle_loss_sum, rb_kl_loss, rb_kl_loss_cascaded, rb_kl_loss_transport, rb_kl_sum,
    GemMode,
};
pub use optim::{Optimizer, OptimizerKind};
pub use sir::{sir_resample, SirResult};

use objectives::{accumulate, chunk_points, rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mle,
    Gem,
    RbKl,
    ConditionalMle,
}

fn default_steps() -> usize {
    1000
}

fn default_lr() -> f64 {
    1e-3
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Minibatch size for `mle`/`conditional_mle`/`gem` (absent: full
    /// batch) and prior draws per step for `rb_kl` (absent: 256).
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Ignored by `gem`, which always takes plain ascent steps.
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_true")]
    pub line_search: bool,
    #[serde(default)]
    pub gem_mode: GemMode,
    /// Reuse one set of prior draws for every `rb_kl` step.
    #[serde(default)]
    pub fixed_batch: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            steps: default_steps(),
            batch_size: None,
            learning_rate: default_lr(),
            optimizer: OptimizerKind::Adam,
            line_search: true,
            gem_mode: GemMode::Layer,
            fixed_batch: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(DifError::InvalidArgument(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == Some(0) {
            return Err(DifError::InvalidArgument("train.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    /// Mean log-likelihood for `mle`/`gem`/`conditional_mle` (before the
    /// step's update), reverse-KL estimate for `rb_kl`.
    pub objective: f64,
    pub grad_norm: f64,
    /// Wall time since the start of the run.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub entries: Vec<TraceEntry>,
    /// GEM stopped early because no step size increased the surrogate.
    pub converged: bool,
}

impl TraceRecord {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.objective).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "objective", "grad_norm", "seconds"])?;
        for e in &self.entries {
            w.write_record([
                e.step.to_string(),
                e.objective.to_string(),
                e.grad_norm.to_string(),
                e.seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// What a run learns from.
pub enum TrainData<'d> {
    Samples(&'d Tensor),
    Target(&'d dyn LogDensity),
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn minibatch(n: usize, size: Option<usize>, rng: &mut StreamRng) -> Option<Vec<usize>> {
    match size {
        Some(m) if m < n => Some(sample_indices(rng, n, m).into_vec()),
        _ => None,
    }
}

fn nonfinite_at(step: usize, what: &str) -> DifError {
    DifError::NonFinite(format!("{what} at step {step}"))
}

fn check_grad(step: usize, value: f64, grad: &[f64]) -> Result<()> {
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(nonfinite_at(step, "objective or gradient"));
    }
    Ok(())
}

/// Runs the configured loop, updating `store` in place.
pub fn fit(stack: &DifStack, store: &mut ParameterStore, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TraceRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut trace = TraceRecord::default();
    let mut batch_rng = stream(cfg.seed, 11);
    let mut opt = Optimizer::new(cfg.optimizer, store.len());
    match (cfg.objective, data) {
        (Objective::Mle, TrainData::Samples(x)) => {
            let chunk = chunk_points(stack.total_components());
            for step in 0..cfg.steps {
                let picked = minibatch(x.rows(), cfg.batch_size, &mut batch_rng).map(|idx| x.select_rows(&idx));
                let batch = picked.as_ref().unwrap_or(x);
                let m = batch.rows() as f64;
                let (loss, mut grad) = accumulate(store, batch.rows(), chunk, |b, r| {
                    objectives::mle_loss_sum(b, stack, &rows(batch, r))
                })
                .map_err(|e| relabel(e, step))?;
                grad.iter_mut().for_each(|g| *g /= m);
                check_grad(step, loss, &grad)?;
                trace.entries.push(TraceEntry {
                    step,
                    objective: -loss / m,
                    grad_norm: norm(&grad),
                    seconds: start.elapsed().as_secs_f64(),
                });
                opt.step(store.values_mut(), &grad, cfg.learning_rate);
            }
        }
        (Objective::Gem, TrainData::Samples(x)) => {
            for step in 0..cfg.steps {
                let picked = minibatch(x.rows(), cfg.batch_size, &mut batch_rng).map(|idx| x.select_rows(&idx));
                let batch = picked.as_ref().unwrap_or(x);
                let m = batch.rows() as f64;
                let s = gem_step(stack, store, batch, cfg.learning_rate, cfg.line_search, cfg.gem_mode)
                    .map_err(|e| relabel(e, step))?;
                trace.entries.push(TraceEntry {
                    step,
                    objective: s.surrogate_before / m,
                    grad_norm: s.grad_norm / m,
                    seconds: start.elapsed().as_secs_f64(),
                });
                if s.converged {
                    trace.converged = true;
                    break;
                }
            }
        }
        (Objective::RbKl, TrainData::Target(log_p)) => {
            if log_p.dim() != stack.dim {
                return Err(DifError::DimensionMismatch {
                    expected: stack.dim,
                    got: log_p.dim(),
                });
            }
            let m = cfg.batch_size.unwrap_or(256);
            let mut z_rng = stream(cfg.seed, 12);
            let fixed = cfg.fixed_batch.then(|| standard_normal(&mut z_rng, m, stack.dim));
            let chunk = chunk_points(stack.total_components().pow(2));
            let transports = stack.transports();
            for step in 0..cfg.steps {
                let z = match &fixed {
                    Some(z) => z.clone(),
                    None => standard_normal(&mut z_rng, m, stack.dim),
                };
                let (loss, mut grad) = accumulate(store, m, chunk, |b, r| {
                    objectives::rb_kl_sum(b, &transports, log_p, &rows(&z, r))
                })
                .map_err(|e| relabel(e, step))?;
                let loss = loss / m as f64;
                grad.iter_mut().for_each(|g| *g /= m as f64);
                check_grad(step, loss, &grad)?;
                trace.entries.push(TraceEntry {
                    step,
                    objective: loss,
                    grad_norm: norm(&grad),
                    seconds: start.elapsed().as_secs_f64(),
                });
                opt.step(store.values_mut(), &grad, cfg.learning_rate);
            }
        }
        (obj, TrainData::Samples(_)) => {
            return Err(DifError::InvalidArgument(format!(
                "objective {obj:?} cannot train from samples alone"
            )))
        }
        (obj, TrainData::Target(_)) => {
            return Err(DifError::InvalidArgument(format!(
                "objective {obj:?} needs samples, not a target density"
            )))
        }
    }
    Ok(trace)
}

/// Conditional maximum likelihood for a [`ConditionalDifLayer`].
pub fn fit_conditional(
    layer: &ConditionalDifLayer,
    store: &mut ParameterStore,
    x: &Tensor,
    omega: &Tensor,
    cfg: &TrainConfig,
) -> Result<TraceRecord> {
    cfg.validate()?;
    if cfg.objective != Objective::ConditionalMle {
        return Err(DifError::InvalidArgument(format!(
            "conditional fit needs objective conditional_mle, got {:?}",
            cfg.objective
        )));
    }
    if x.rows() != omega.rows() {
        return Err(DifError::DimensionMismatch {
            expected: x.rows(),
            got: omega.rows(),
        });
    }
    let start = Instant::now();
    let mut trace = TraceRecord::default();
    let mut batch_rng = stream(cfg.seed, 11);
    let mut opt = Optimizer::new(cfg.optimizer, store.len());
    let chunk = chunk_points(layer.k);
    for step in 0..cfg.steps {
        let idx = minibatch(x.rows(), cfg.batch_size, &mut batch_rng);
        let (bx, bw) = match &idx {
            Some(i) => (x.select_rows(i), omega.select_rows(i)),
            None => (x.clone(), omega.clone()),
        };
        let m = bx.rows() as f64;
        let (loss, mut grad) = accumulate(store, bx.rows(), chunk, |b, r| {
            conditional_mle_loss_sum(b, layer, &rows(&bx, r.clone()), &rows(&bw, r))
        })
        .map_err(|e| relabel(e, step))?;
        grad.iter_mut().for_each(|g| *g /= m);
        check_grad(step, loss, &grad)?;
        trace.entries.push(TraceEntry {
            step,
            objective: -loss / m,
            grad_norm: norm(&grad),
            seconds: start.elapsed().as_secs_f64(),
        });
        opt.step(store.values_mut(), &grad, cfg.learning_rate);
    }
    Ok(trace)
}

fn relabel(e: DifError, step: usize) -> DifError {
    match e {
        DifError::NonFinite(what) => DifError::NonFinite(format!("{what} at step {step}")),
        other => other,
    }
}
