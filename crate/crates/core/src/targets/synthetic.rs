use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dif::LogDensity;
use crate::diffable::{logsumexp, Bind, Tensor, Var};
use crate::error::{DifError, Result};
use crate::rng::categorical;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// The second moon is the first one reflected through `x -> MOON_OFFSET - x`.
pub const MOON_OFFSET: [f64; 2] = [1.0, 0.5];

fn default_moon_noise() -> f64 {
    0.05
}

fn default_density_sigma() -> f64 {
    0.1
}

/// Two interleaved half circles of radius 1.
///
/// The upper moon is `(cos t, sin t)`, the lower one `(1 - cos t, 0.5 - sin t)`,
/// `t ~ U(0, pi)`, plus isotropic Gaussian noise. The analytic unnormalized
/// density is an equal mixture of two ring-times-half-plane Gaussians of
/// width `density_sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoMoons {
    #[serde(default = "default_moon_noise")]
    pub noise: f64,
    #[serde(default = "default_density_sigma")]
    pub density_sigma: f64,
}

impl Default for TwoMoons {
    fn default() -> Self {
        Self {
            noise: default_moon_noise(),
            density_sigma: default_density_sigma(),
        }
    }
}

impl TwoMoons {
    pub(crate) fn validated(&self) -> Result<Self> {
        if !(self.noise >= 0.0) || !(self.density_sigma > 0.0) {
            return Err(DifError::InvalidArgument(format!(
                "two_moons needs noise >= 0 and density_sigma > 0, got {} and {}",
                self.noise, self.density_sigma
            )));
        }
        Ok(self.clone())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let n_upper = n / 2;
        let mut pts: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let t = rng.random_range(0.0..PI);
                let (c, s) = (t.cos(), t.sin());
                if i < n_upper {
                    [c, s]
                } else {
                    [MOON_OFFSET[0] - c, MOON_OFFSET[1] - s]
                }
            })
            .collect();
        pts.shuffle(rng);
        let mut data = Vec::with_capacity(2 * n);
        for p in pts {
            for v in p {
                let e: f64 = rng.sample(StandardNormal);
                data.push(v + self.noise * e);
            }
        }
        Tensor::new(n, 2, data)
    }

    pub fn unnorm_log_pdf(&self, x: &[f64]) -> f64 {
        let inv = 1.0 / (2.0 * self.density_sigma * self.density_sigma);
        let r_up = (x[0] * x[0] + x[1] * x[1]).sqrt();
        let (dx, dy) = (x[0] - MOON_OFFSET[0], x[1] - MOON_OFFSET[1]);
        let r_low = (dx * dx + dy * dy).sqrt();
        let up = -((r_up - 1.0).powi(2) + (-x[1]).max(0.0).powi(2)) * inv;
        let low = -((r_low - 1.0).powi(2) + (x[1] - MOON_OFFSET[1]).max(0.0).powi(2)) * inv;
        logsumexp(&[up, low]) + 0.5f64.ln()
    }
}

impl LogDensity for TwoMoons {
    fn dim(&self) -> usize {
        2
    }

    fn log_density<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<Var<'a>> {
        if x.cols() != 2 {
            return Err(DifError::DimensionMismatch { expected: 2, got: x.cols() });
        }
        let inv = 1.0 / (2.0 * self.density_sigma * self.density_sigma);
        let y = x.select_cols(&[1]);
        let offset = bind.constant(Tensor::row(&MOON_OFFSET));
        let r_up = x.square().sum_rows().sqrt();
        let r_low = (x - offset).square().sum_rows().sqrt();
        let up = (r_up.add_scalar(-1.0).square() + (-y).relu().square()).scale(-inv);
        let low = (r_low.add_scalar(-1.0).square() + y.add_scalar(-MOON_OFFSET[1]).relu().square())
            .scale(-inv);
        Ok(bind
            .tape()
            .concat_cols(&[up, low])
            .logsumexp_rows()
            .add_scalar(0.5f64.ln()))
    }
}

fn default_s_noise() -> f64 {
    0.05
}

/// The planar S curve `(sin t, sign(t)(cos t - 1))`, `t = 3 pi (u - 1/2)`,
/// plus isotropic Gaussian noise. Sample-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SCurve {
    #[serde(default = "default_s_noise")]
    pub noise: f64,
}

impl Default for SCurve {
    fn default() -> Self {
        Self { noise: default_s_noise() }
    }
}

impl SCurve {
    pub(crate) fn validated(&self) -> Result<Self> {
        if !(self.noise >= 0.0) {
            return Err(DifError::InvalidArgument(format!("s_curve noise must be >= 0, got {}", self.noise)));
        }
        Ok(self.clone())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let t = 3.0 * PI * (rng.random::<f64>() - 0.5);
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            data.push(t.sin() + self.noise * e0);
            data.push(t.signum() * (t.cos() - 1.0) + self.noise * e1);
        }
        Tensor::new(n, 2, data)
    }
}

/// Diagonal-covariance Gaussian mixture. `log_scale` shifts the
/// unnormalized log-density, so the normalizing constant of `p~` is
/// `exp(log_scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sds: Vec<Vec<f64>>,
    #[serde(default)]
    pub log_scale: f64,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, sds: Vec<Vec<f64>>) -> Result<Self> {
        Self {
            weights,
            means,
            sds,
            log_scale: 0.0,
        }
        .validated()
    }

    /// Equal mixture at `-4, -2, 0, 2, 4` with standard deviation 0.35.
    pub fn five_modes_1d() -> Self {
        Self {
            weights: vec![0.2; 5],
            means: [-4.0, -2.0, 0.0, 2.0, 4.0].iter().map(|m| vec![*m]).collect(),
            sds: vec![vec![0.35]; 5],
            log_scale: 0.0,
        }
    }

    pub fn with_log_scale(mut self, log_scale: f64) -> Self {
        self.log_scale = log_scale;
        self
    }

    /// Checks shapes and positivity and normalizes the weights.
    pub(crate) fn validated(&self) -> Result<Self> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.sds.len() != k {
            return Err(DifError::InvalidArgument(format!(
                "gaussian_mixture needs matching non-empty weights/means/sds, got {}/{}/{}",
                k,
                self.means.len(),
                self.sds.len()
            )));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().chain(&self.sds).any(|v| v.len() != d) {
            return Err(DifError::InvalidArgument(
                "gaussian_mixture components must share a positive dimension".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(DifError::InvalidArgument("mixture weights must be positive".into()));
        }
        if self.sds.iter().flatten().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(DifError::InvalidArgument("mixture sds must be positive".into()));
        }
        if self.means.iter().flatten().any(|m| !m.is_finite()) || !self.log_scale.is_finite() {
            return Err(DifError::NonFinite("mixture parameters".into()));
        }
        let total: f64 = self.weights.iter().sum();
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w /= total);
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn component_log_pdf(&self, k: usize, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.means[k])
            .zip(&self.sds[k])
            .map(|((x, m), s)| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - 0.5 * LN_2PI
            })
            .sum()
    }

    /// Normalized log-density.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.n_components())
            .map(|k| self.weights[k].ln() + self.component_log_pdf(k, x))
            .collect();
        logsumexp(&terms)
    }

    pub fn unnorm_log_pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf(x) + self.log_scale
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let k = categorical(rng, &self.weights);
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                data.push(self.means[k][j] + self.sds[k][j] * e);
            }
        }
        Tensor::new(n, d, data)
    }
}

impl LogDensity for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn log_density<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<Var<'a>> {
        if x.cols() != self.dim() {
            return Err(DifError::DimensionMismatch {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        let cols: Vec<Var<'a>> = (0..self.n_components())
            .map(|k| {
                let mu = bind.constant(Tensor::row(&self.means[k]));
                let inv: Vec<f64> = self.sds[k].iter().map(|s| 1.0 / s).collect();
                let c = self.weights[k].ln()
                    - self.sds[k].iter().map(|s| s.ln()).sum::<f64>()
                    - 0.5 * self.dim() as f64 * LN_2PI;
                ((x - mu) * bind.constant(Tensor::row(&inv)))
                    .square()
                    .sum_rows()
                    .scale(-0.5)
                    .add_scalar(c)
            })
            .collect();
        let lse = if cols.len() == 1 {
            cols[0]
        } else {
            bind.tape().concat_cols(&cols).logsumexp_rows()
        };
        Ok(lse.add_scalar(self.log_scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dif::log_density_points;
    use crate::rng::stream;

    #[test]
    fn standard_normal_mean_and_value() {
        let g = GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        assert_eq!(g.unnorm_log_pdf(&[0.0]), -0.5 * LN_2PI);
        let x = g.sample(100_000, &mut stream(1, 0));
        let mean = x.data().iter().sum::<f64>() / 1e5;
        assert!(mean.abs() <= 0.01, "mean {mean}");
        let shifted = g.clone().with_log_scale(1.0);
        for x in [-2.0, 0.3, 5.0] {
            assert_eq!(shifted.unnorm_log_pdf(&[x]), g.unnorm_log_pdf(&[x]) + 1.0);
        }
    }

    #[test]
    fn tape_density_matches_pointwise() {
        let g = GaussianMixture::new(
            vec![1.0, 3.0],
            vec![vec![0.0, 1.0], vec![-2.0, 0.5]],
            vec![vec![1.0, 0.5], vec![0.3, 2.0]],
        )
        .unwrap()
        .with_log_scale(-0.7);
        let pts = vec![vec![0.1, 0.2], vec![-2.0, 3.0], vec![5.0, -1.0]];
        let tape = log_density_points(&g, &Tensor::from_points(&pts, 2)).unwrap();
        for (p, t) in pts.iter().zip(tape) {
            assert!((g.unnorm_log_pdf(p) - t).abs() <= 1e-13);
        }
        assert!((g.weights[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_mixtures() {
        assert!(GaussianMixture::new(vec![], vec![], vec![]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![vec![0.0]]).is_err());
        assert!(GaussianMixture::new(vec![-1.0], vec![vec![0.0]], vec![vec![1.0]]).is_err());
        assert!(GaussianMixture::new(vec![1.0, 1.0], vec![vec![0.0], vec![0.0, 1.0]], vec![vec![1.0]; 2]).is_err());
    }

    #[test]
    fn noiseless_moons_lie_on_the_arcs() {
        let m = TwoMoons {
            noise: 0.0,
            ..TwoMoons::default()
        };
        let x = m.sample(2001, &mut stream(2, 0));
        let mut counts = [0, 0];
        for p in x.iter_rows() {
            let r_up = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let r_low = ((p[0] - 1.0).powi(2) + (p[1] - 0.5).powi(2)).sqrt();
            if (r_up - 1.0).abs() <= 1e-12 && p[1] >= 0.0 {
                counts[0] += 1;
            } else {
                assert!((r_low - 1.0).abs() <= 1e-12 && p[1] <= 0.5, "{p:?}");
                counts[1] += 1;
            }
        }
        assert_eq!(counts, [1000, 1001]);
    }

    #[test]
    fn moon_density_is_reflection_symmetric() {
        let m = TwoMoons::default();
        let mut rng = stream(3, 0);
        for _ in 0..200 {
            let x = [rng.random_range(-2.0..3.0), rng.random_range(-1.5..2.0)];
            let r = [MOON_OFFSET[0] - x[0], MOON_OFFSET[1] - x[1]];
            assert!((m.unnorm_log_pdf(&x) - m.unnorm_log_pdf(&r)).abs() <= 1e-12);
        }
        let pts: Vec<Vec<f64>> = (0..50).map(|i| vec![0.1 * i as f64 - 2.0, 0.05 * i as f64 - 1.0]).collect();
        let tape = log_density_points(&m, &Tensor::from_points(&pts, 2)).unwrap();
        for (p, t) in pts.iter().zip(tape) {
            assert!((m.unnorm_log_pdf(p) - t).abs() <= 1e-12);
        }
    }

    #[test]
    fn s_curve_shape() {
        let s = SCurve { noise: 0.0 };
        let x = s.sample(1000, &mut stream(4, 0));
        for p in x.iter_rows() {
            assert!(p[0].abs() <= 1.0 && p[1].abs() <= 2.0);
            // x^2 + (|y| - 1)^2 = 1 on the curve
            assert!((p[0] * p[0] + (p[1].abs() - 1.0).powi(2) - 1.0).abs() <= 1e-12);
        }
    }
}
