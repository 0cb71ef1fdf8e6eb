//! Fully connected networks recorded on the tape.
//!
//! Weight matrices are stored as `out x in` so a layer reads `h W^T + b`
//! over a batch of row vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffable::{Bind, ParameterStore, Var};
use crate::error::{DifError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<'a>(self, x: Var<'a>) -> Var<'a> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputInit {
    /// Same Glorot-uniform draw as the hidden layers.
    Glorot,
    /// Last weight matrix and bias start at zero.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    /// `[n_in, hidden..., n_out]`
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        widths: &[usize],
        activation: Activation,
        output_init: OutputInit,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(DifError::InvalidArgument(format!(
                "network `{prefix}` needs at least input and output widths, all positive; got {widths:?}"
            )));
        }
        let mlp = Self {
            prefix: prefix.to_string(),
            widths: widths.to_vec(),
            activation,
        };
        let n_layers = widths.len() - 1;
        for l in 0..n_layers {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let zero = l + 1 == n_layers && output_init == OutputInit::Zero;
            let w = if zero {
                vec![0.0; n_in * n_out]
            } else {
                let a = (6.0 / (n_in + n_out) as f64).sqrt();
                (0..n_in * n_out).map(|_| rng.random_range(-a..=a)).collect()
            };
            store.register(&mlp.weight_name(l), &[n_out, n_in], w)?;
            store.register_zeros(&mlp.bias_name(l), &[n_out])?;
        }
        Ok(mlp)
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.W{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    pub fn forward<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<Var<'a>> {
        if x.cols() != self.input_width() {
            return Err(DifError::DimensionMismatch {
                expected: self.input_width(),
                got: x.cols(),
            });
        }
        let mut h = x;
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let w = bind.param(&self.weight_name(l))?;
            let b = bind.param(&self.bias_name(l))?;
            h = h.matmul_t(w) + b;
            if l < last {
                h = self.activation.apply(h);
            }
        }
        Ok(h)
    }

    /// Sets the last layer to the constant map `x -> bias`.
    pub fn set_constant_output(&self, store: &mut ParameterStore, bias: &[f64]) -> Result<()> {
        let last = self.n_layers() - 1;
        for v in store.get_mut(&self.weight_name(last))? {
            *v = 0.0;
        }
        store.set(&self.bias_name(last), bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffable::{evaluate, program, Tensor};
    use crate::rng::stream;

    #[test]
    fn zero_output_layer_gives_bias() {
        let mut store = ParameterStore::new();
        let mut rng = stream(0, 0);
        let mlp = Mlp::new("n", &[2, 8, 3], Activation::Tanh, OutputInit::Zero, &mut store, &mut rng)
            .unwrap();
        mlp.set_constant_output(&mut store, &[1.0, 2.0, 3.0]).unwrap();
        let f = program(|b| {
            let x = b.constant(Tensor::new(2, 2, vec![0.3, -4.0, 10.0, 2.0]));
            let y = mlp.forward(b, x)?;
            assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
            Ok(y.sum())
        });
        assert_eq!(evaluate(&f, &store).unwrap(), 12.0);
    }

    #[test]
    fn glorot_bounds() {
        let mut store = ParameterStore::new();
        let mut rng = stream(3, 0);
        let mlp = Mlp::new("n", &[4, 6], Activation::Sigmoid, OutputInit::Glorot, &mut store, &mut rng)
            .unwrap();
        let a = (6.0f64 / 10.0).sqrt();
        assert!(store.get(&mlp.weight_name(0)).unwrap().iter().all(|w| w.abs() <= a));
    }
}
