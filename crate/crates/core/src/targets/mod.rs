//! Benchmark distributions, dataset loading and grid quadrature.
//!
//! A [`TargetSpec`] is the serializable description used in run configs;
//! [`TargetSpec::load`] turns it into a [`Target`], reading files where
//! needed. Targets expose up to two capabilities: drawing samples (needed
//! for density estimation) and evaluating an unnormalized log-density on
//! the tape (needed for variational inference).

mod dataset;
mod grid;
mod image;
mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dif::LogDensity;
use crate::diffable::{Bind, Tensor, Var};
use crate::error::{DifError, Result};
use crate::rng::stream;

pub use dataset::{load_csv_dataset, write_csv_dataset, Dataset};
pub use grid::{quadrature_integral, Axis, DensityGrid};
pub use image::{load_image_density, parse_pgm, write_pgm, ImageDensity};
pub use synthetic::{GaussianMixture, SCurve, TwoMoons};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    TwoMoons(TwoMoons),
    SCurve(SCurve),
    GaussianMixture(GaussianMixture),
    #[serde(rename = "five_modes_1d")]
    FiveModes1d,
    ImageDensity { path: PathBuf },
    CsvDataset { path: PathBuf },
}

impl TargetSpec {
    /// Materializes the target. Relative paths are resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<Target> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Ok(match self {
            TargetSpec::TwoMoons(t) => Target::TwoMoons(t.validated()?),
            TargetSpec::SCurve(t) => Target::SCurve(t.validated()?),
            TargetSpec::GaussianMixture(g) => Target::GaussianMixture(g.validated()?),
            TargetSpec::FiveModes1d => Target::GaussianMixture(GaussianMixture::five_modes_1d()),
            TargetSpec::ImageDensity { path } => Target::ImageDensity(load_image_density(&resolve(path))?),
            TargetSpec::CsvDataset { path } => Target::Dataset(load_csv_dataset(&resolve(path))?),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TargetSpec::TwoMoons(_) => "two_moons",
            TargetSpec::SCurve(_) => "s_curve",
            TargetSpec::GaussianMixture(_) => "gaussian_mixture",
            TargetSpec::FiveModes1d => "five_modes_1d",
            TargetSpec::ImageDensity { .. } => "image_density",
            TargetSpec::CsvDataset { .. } => "csv_dataset",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    TwoMoons(TwoMoons),
    SCurve(SCurve),
    GaussianMixture(GaussianMixture),
    ImageDensity(ImageDensity),
    Dataset(Dataset),
}

impl Target {
    pub fn name(&self) -> &'static str {
        match self {
            Target::TwoMoons(_) => "two_moons",
            Target::SCurve(_) => "s_curve",
            Target::GaussianMixture(_) => "gaussian_mixture",
            Target::ImageDensity(_) => "image_density",
            Target::Dataset(_) => "csv_dataset",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Target::TwoMoons(_) | Target::SCurve(_) | Target::ImageDensity(_) => 2,
            Target::GaussianMixture(g) => g.dim(),
            Target::Dataset(d) => d.x.cols(),
        }
    }

    pub fn can_sample(&self) -> bool {
        true
    }

    pub fn can_eval_unnorm_logpdf(&self) -> bool {
        matches!(self, Target::TwoMoons(_) | Target::GaussianMixture(_))
    }

    /// `n` i.i.d. draws. Datasets are resampled with replacement.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        let mut rng = stream(seed, 0);
        Ok(match self {
            Target::TwoMoons(t) => t.sample(n, &mut rng),
            Target::SCurve(t) => t.sample(n, &mut rng),
            Target::GaussianMixture(g) => g.sample(n, &mut rng),
            Target::ImageDensity(img) => img.sample(n, &mut rng),
            Target::Dataset(d) => d.resample(n, &mut rng),
        })
    }

    pub fn unnorm_log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(DifError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        match self {
            Target::TwoMoons(t) => Ok(t.unnorm_log_pdf(x)),
            Target::GaussianMixture(g) => Ok(g.unnorm_log_pdf(x)),
            _ => Err(self.missing("unnorm_log_pdf")),
        }
    }

    fn missing(&self, capability: &'static str) -> DifError {
        DifError::MissingCapability {
            target: self.name(),
            capability,
        }
    }
}

impl LogDensity for Target {
    fn dim(&self) -> usize {
        Target::dim(self)
    }

    fn log_density<'a>(&self, bind: &Bind<'a>, x: Var<'a>) -> Result<Var<'a>> {
        match self {
            Target::TwoMoons(t) => t.log_density(bind, x),
            Target::GaussianMixture(g) => g.log_density(bind, x),
            _ => Err(self.missing("unnorm_log_pdf")),
        }
    }
}
