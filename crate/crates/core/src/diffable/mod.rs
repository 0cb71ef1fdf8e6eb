//! Reverse-mode differentiation and parameter management.
//!
//! A differentiable program is anything implementing [`Program`]: given a
//! [`Bind`] (a tape plus read access to a [`ParameterStore`]) it records a
//! scalar. [`forward_eval`] runs it once and hands back a
//! [`GradientContext`], which [`backward_grad`] consumes to produce the
//! gradient with respect to every stored parameter.

mod store;
mod tape;
mod tensor;

use std::cell::RefCell;
use std::collections::HashMap;

pub use store::{ParamSlot, ParameterStore, PARAMS_VERSION};
pub use tape::{logsumexp, Tape, Var};
pub use tensor::Tensor;

use crate::error::{DifError, Result};

/// A tape bound to a parameter store for the duration of one evaluation.
pub struct Bind<'a> {
    tape: &'a Tape,
    store: &'a ParameterStore,
    leaves: RefCell<HashMap<String, usize>>,
}

impl<'a> Bind<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParameterStore) -> Self {
        Self {
            tape,
            store,
            leaves: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    /// The named parameter slice as a differentiable leaf. Repeated lookups
    /// return the same leaf.
    pub fn param(&self, name: &str) -> Result<Var<'a>> {
        if let Some(&id) = self.leaves.borrow().get(name) {
            return Ok(self.tape.var(id));
        }
        let slot = self.store.slot(name)?;
        let (r, c) = slot.matrix_shape();
        let value = Tensor::new(r, c, self.store.get(name)?.to_vec());
        let var = self.tape.param_leaf(value, slot.offset);
        self.leaves.borrow_mut().insert(name.to_string(), var.id());
        Ok(var)
    }

    pub fn constant(&self, value: Tensor) -> Var<'a> {
        self.tape.constant(value)
    }

    pub fn scalar(&self, value: f64) -> Var<'a> {
        self.tape.scalar(value)
    }
}

/// A scalar-valued differentiable program over a parameter store.
pub trait Program {
    fn eval<'a>(&self, bind: &Bind<'a>) -> Result<Var<'a>>;
}

impl<F> Program for F
where
    F: for<'a> Fn(&Bind<'a>) -> Result<Var<'a>>,
{
    fn eval<'a>(&self, bind: &Bind<'a>) -> Result<Var<'a>> {
        self(bind)
    }
}

/// Pins a closure to the higher-ranked signature [`Program`] needs; closures
/// passed straight through this infer their lifetimes correctly.
pub fn program<F>(f: F) -> F
where
    F: for<'a> Fn(&Bind<'a>) -> Result<Var<'a>>,
{
    f
}

/// Everything needed for exactly one reverse pass.
#[derive(Debug)]
pub struct GradientContext {
    tape: Tape,
    output: usize,
    n_params: usize,
}

impl GradientContext {
    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }
}

/// Runs `program` once and records it.
///
/// Fails on unknown parameter names and when the scalar output is not
/// finite, which is how a diverging objective shows up.
pub fn forward_eval<P: Program + ?Sized>(
    program: &P,
    store: &ParameterStore,
) -> Result<(f64, GradientContext)> {
    let tape = Tape::new();
    let (value, output) = {
        let bind = Bind::new(&tape, store);
        let out = program.eval(&bind)?;
        if out.shape() != (1, 1) {
            return Err(DifError::InvalidArgument(format!(
                "program output must be scalar, got shape {:?}",
                out.shape()
            )));
        }
        (out.item(), out.id())
    };
    if !value.is_finite() {
        return Err(DifError::NonFinite(format!("program output is {value}")));
    }
    Ok((
        value,
        GradientContext {
            tape,
            output,
            n_params: store.len(),
        },
    ))
}

/// Reverse pass. Consumes the context, so a context can't be replayed.
pub fn backward_grad(ctx: GradientContext) -> Vec<f64> {
    let out = ctx.tape.var(ctx.output);
    ctx.tape.gradient(out, ctx.n_params)
}

pub fn value_and_grad<P: Program + ?Sized>(
    program: &P,
    store: &ParameterStore,
) -> Result<(f64, Vec<f64>)> {
    let (value, ctx) = forward_eval(program, store)?;
    Ok((value, backward_grad(ctx)))
}

/// Forward only.
pub fn evaluate<P: Program + ?Sized>(program: &P, store: &ParameterStore) -> Result<f64> {
    forward_eval(program, store).map(|(v, _)| v)
}

/// Runs `f` on a fresh tape and returns whatever owned value it builds.
/// For evaluations that need tensors rather than one scalar.
pub fn with_bind<T, F>(store: &ParameterStore, f: F) -> Result<T>
where
    F: for<'a> FnOnce(&Bind<'a>) -> Result<T>,
{
    let tape = Tape::new();
    let bind = Bind::new(&tape, store);
    f(&bind)
}

/// Largest `|analytic - central| / (|analytic| + step)` over all parameters.
pub fn finite_diff_check<P: Program + ?Sized>(
    program: &P,
    store: &ParameterStore,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(DifError::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (_, grad) = value_and_grad(program, store)?;
    let mut probe = store.clone();
    let mut worst = 0.0_f64;
    for (i, analytic) in grad.iter().enumerate() {
        let orig = store.values()[i];
        probe.values_mut()[i] = orig + step;
        let up = evaluate(program, &probe)?;
        probe.values_mut()[i] = orig - step;
        let down = evaluate(program, &probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max((analytic - numeric).abs() / (analytic.abs() + step));
    }
    Ok(worst)
}
