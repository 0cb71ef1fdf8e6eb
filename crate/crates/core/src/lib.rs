//! Discretely indexed flows.
//!
//! A discretely indexed flow (DIF) transports a standard normal prior through
//! one of `K` invertible maps chosen by a categorical index whose
//! probabilities depend on the latent point. The marginal density stays
//! available in closed form, sampling works in both directions, and stacks of
//! DIF and coupling layers compose like ordinary flows.
//!
//! Modules:
//! - [`diffable`]: reverse-mode differentiation and the parameter store
//! - [`maps`]: invertible maps with log-Jacobian determinants
//! - [`weightnet`]: softmax weight networks on the simplex
//! - [`dif`]: layers, stacks, densities, samplers and cascades
//! - [`train`]: objectives, optimizers, EM warm start and SIR
//! - [`targets`]: benchmark distributions, data loading and quadrature

pub mod diffable;
pub mod dif;
pub mod error;
pub mod maps;
pub mod nn;
pub mod rng;
pub mod targets;
pub mod train;
pub mod weightnet;

pub use error::{DifError, Result};
