//! Builders and oracles shared by the integration tests.
#![allow(dead_code)]

use dif_core::dif::{DifStack, Layer, StackBuilder};
use dif_core::diffable::{ParameterStore, Tensor};
use dif_core::nn::Activation;
use dif_core::rng::stream;
use dif_core::weightnet::WeightNetConfig;
use rand::Rng;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn net(hidden: &[usize]) -> WeightNetConfig {
    WeightNetConfig {
        hidden: hidden.to_vec(),
        activation: Activation::Tanh,
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Part {
    Dif(usize),
    Coupling,
}

/// Stack with random map locations and scales, then every parameter
/// (weight networks and couplings included) jittered by `jitter`.
pub fn random_stack(dim: usize, parts: &[Part], seed: u64, jitter: f64) -> (DifStack, ParameterStore) {
    let mut store = ParameterStore::new();
    let mut rng = stream(seed, 1);
    let mut b = StackBuilder::new(dim, &mut store, &mut rng);
    for part in parts {
        b = match part {
            Part::Dif(k) => b.dif(*k, &net(&[8, 8])).unwrap(),
            Part::Coupling => b.coupling(Some(&[8])).unwrap(),
        };
    }
    let stack = b.build().unwrap();
    let mut rng = stream(seed, 2);
    store.jitter(&mut rng, jitter);
    for layer in &stack.layers {
        if let Layer::Dif(d) = layer {
            for m in d.affine_maps().unwrap() {
                let loc: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.5..2.5)).collect();
                let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.6..0.4)).collect();
                m.set(&mut store, &loc, &ls).unwrap();
            }
        }
    }
    (stack, store)
}

pub fn uniform_points(n: usize, dim: usize, half: f64, seed: u64) -> Tensor {
    let mut rng = stream(seed, 7);
    Tensor::new(n, dim, (0..n * dim).map(|_| rng.random_range(-half..half)).collect())
}

pub fn normal_log_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * LN_2PI
}

/// Diagonal Gaussian mixture log-density.
pub fn gmm_log_pdf(x: &[f64], weights: &[f64], means: &[Vec<f64>], sds: &[Vec<f64>]) -> f64 {
    let terms: Vec<f64> = (0..weights.len())
        .map(|k| weights[k].ln() + x.iter().enumerate().map(|(j, v)| normal_log_pdf(*v, means[k][j], sds[k][j])).sum::<f64>())
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

/// Kolmogorov-Smirnov distance between sorted samples and a CDF.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// CDF of a 1-D model by cumulative trapezoid on `[lo, hi]` with `n` nodes,
/// interpolated linearly.
pub struct GridCdf {
    lo: f64,
    h: f64,
    cum: Vec<f64>,
}

impl GridCdf {
    pub fn new(stack: &DifStack, store: &ParameterStore, lo: f64, hi: f64, n: usize) -> Self {
        let h = (hi - lo) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
        let pdf: Vec<f64> = stack
            .log_density_batch(store, &Tensor::column(&xs))
            .unwrap()
            .iter()
            .map(|l| l.exp())
            .collect();
        let mut cum = vec![0.0; n];
        for i in 1..n {
            cum[i] = cum[i - 1] + 0.5 * h * (pdf[i] + pdf[i - 1]);
        }
        Self { lo, h, cum }
    }

    pub fn total(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = (x - self.lo) / self.h;
        if t <= 0.0 {
            return 0.0;
        }
        let i = t.floor() as usize;
        if i + 1 >= self.cum.len() {
            return self.total();
        }
        let f = t - i as f64;
        self.cum[i] * (1.0 - f) + self.cum[i + 1] * f
    }
}
