//! Run configuration files.
//!
//! One JSON file describes a run: the target, the layer list, the training
//! loop and where outputs go. Parsing reports the JSON path of the offending
//! field; [`RunConfig::hash`] fingerprints everything that affects results.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dif_core::targets::TargetSpec;
use dif_core::train::TrainConfig;
use dif_core::weightnet::WeightNetConfig;

use crate::error::{CliError, CliResult};

fn default_n_samples() -> usize {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Relative paths are taken from the config file's directory.
    pub output_dir: PathBuf,
    pub target: TargetSpec,
    /// Points drawn from a synthetic target for density estimation.
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub sir: SirConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<LayerConfig>,
}

fn default_em_iters() -> usize {
    200
}

fn default_covariate_hidden() -> Vec<usize> {
    vec![32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    Dif {
        #[serde(rename = "K", alias = "k")]
        k: usize,
        #[serde(default)]
        weightnet: WeightNetConfig,
        #[serde(default)]
        init: DifInit,
        #[serde(default = "default_em_iters")]
        em_iters: usize,
    },
    Coupling {
        #[serde(default)]
        hidden: Option<Vec<usize>>,
    },
    ConditionalDif {
        #[serde(rename = "K", alias = "k")]
        k: usize,
        #[serde(default)]
        weightnet: WeightNetConfig,
        #[serde(default = "default_covariate_hidden")]
        covariate_hidden: Vec<usize>,
    },
}

/// Starting point of a DIF layer's maps and weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifInit {
    /// Every map is the identity, so the layer passes its prior through.
    #[default]
    Identity,
    /// Unit-scale maps centred at evenly spaced data quantiles.
    Data,
    /// Exact copy of a Gaussian mixture fitted by EM on the training split.
    Gmm,
    /// Unit-scale maps centred at prior draws.
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SirConfig {
    pub n_proposals: usize,
    pub n_out: usize,
}

impl Default for SirConfig {
    fn default() -> Self {
        Self {
            n_proposals: 100_000,
            n_out: 1000,
        }
    }
}

/// A parsed config with overrides applied.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    /// Directory relative target paths are resolved against.
    pub base_dir: PathBuf,
    pub output_dir: PathBuf,
    pub hash: String,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(anyhow!("config is not valid JSON: {e}")))?;
        if value.pointer("/train/seed").is_some() {
            return Err(CliError::Config(anyhow!(
                "train.seed: the training seed is the top-level `seed`"
            )));
        }
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(anyhow!("{path}: {}", e.into_inner()))
        })
    }

    /// SHA-256 of the canonical JSON form with `output_dir` cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

pub fn load(path: &Path, overrides: &Overrides) -> CliResult<LoadedConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(CliError::Config)?;
    let mut run = RunConfig::parse(&text)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if let Some(seed) = overrides.seed {
        run.seed = seed;
    }
    let output_dir = match &overrides.output_dir {
        Some(dir) => dir.clone(),
        None if run.output_dir.is_absolute() => run.output_dir.clone(),
        None => base_dir.join(&run.output_dir),
    };
    run.train.seed = run.seed;
    check_common(&run)?;
    Ok(LoadedConfig {
        hash: run.hash(),
        run,
        base_dir,
        output_dir,
    })
}

fn check_common(run: &RunConfig) -> CliResult<()> {
    let fail = |msg: String| Err(CliError::Config(anyhow!(msg)));
    if run.model.layers.is_empty() {
        return fail("model.layers: at least one layer is required".into());
    }
    if run.train.steps == 0 {
        return fail("train.steps: must be at least 1".into());
    }
    if let Err(e) = run.train.validate() {
        return fail(format!("train: {e}"));
    }
    for (i, layer) in run.model.layers.iter().enumerate() {
        let widths_ok = |w: &[usize]| w.iter().all(|v| *v > 0);
        match layer {
            LayerConfig::Dif { k, weightnet, .. } | LayerConfig::ConditionalDif { k, weightnet, .. } => {
                if *k == 0 {
                    return fail(format!("model.layers[{i}].K: must be at least 1"));
                }
                if !widths_ok(&weightnet.hidden) {
                    return fail(format!("model.layers[{i}].weightnet.hidden: widths must be positive"));
                }
            }
            LayerConfig::Coupling { hidden: Some(h) } if h.is_empty() || !widths_ok(h) => {
                return fail(format!("model.layers[{i}].hidden: needs at least one positive width"));
            }
            LayerConfig::Coupling { .. } => {}
        }
        if let LayerConfig::ConditionalDif { covariate_hidden, .. } = layer {
            if !widths_ok(covariate_hidden) {
                return fail(format!("model.layers[{i}].covariate_hidden: widths must be positive"));
            }
        }
    }
    if run.sir.n_proposals == 0 || run.sir.n_out == 0 || run.sir.n_out > run.sir.n_proposals {
        return fail(format!(
            "sir: need 1 <= n_out <= n_proposals, got n_out={} n_proposals={}",
            run.sir.n_out, run.sir.n_proposals
        ));
    }
    Ok(())
}

/// Rejects layer kinds or initializations a command cannot use.
///
/// Sample-based inits (`data`, `gmm`) go on the first DIF layer and need
/// every layer before it at identity, so that layer sees the raw data; a
/// GMM warm start also needs every later layer at identity.
pub fn check_layers(run: &RunConfig, command: &str, allow_samples: bool) -> CliResult<()> {
    let layers = &run.model.layers;
    let init_of = |l: &LayerConfig| match l {
        LayerConfig::Dif { init, .. } => *init,
        _ => DifInit::Identity,
    };
    let gmm_at = layers.iter().position(|l| init_of(l) == DifInit::Gmm);
    for (i, layer) in layers.iter().enumerate() {
        if let LayerConfig::ConditionalDif { .. } = layer {
            return bail_config(format!(
                "model.layers[{i}]: conditional layers are trained with fit-conditional, not {command}"
            ));
        }
        let init = init_of(layer);
        let sample_based = matches!(init, DifInit::Data | DifInit::Gmm);
        if sample_based && !allow_samples {
            return bail_config(format!(
                "model.layers[{i}].init: `{}` needs samples, which {command} does not have",
                init_name(init)
            ));
        }
        if sample_based && layers[..i].iter().any(|l| init_of(l) != DifInit::Identity) {
            return bail_config(format!(
                "model.layers[{i}].init: `{}` needs every earlier layer at identity",
                init_name(init)
            ));
        }
        if gmm_at.is_some_and(|g| i != g) && init != DifInit::Identity {
            return bail_config(format!(
                "model.layers[{i}].init: a GMM warm start needs every other layer at identity"
            ));
        }
    }
    Ok(())
}

fn init_name(init: DifInit) -> &'static str {
    match init {
        DifInit::Identity => "identity",
        DifInit::Data => "data",
        DifInit::Gmm => "gmm",
        DifInit::Prior => "prior",
    }
}

fn bail_config(msg: String) -> CliResult<()> {
    Err(CliError::Config(anyhow!(msg)))
}

pub fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(anyhow!(msg.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "output_dir": "out",
        "target": {"kind": "five_modes_1d"},
        "model": {"layers": [{"kind": "dif", "K": 4, "init": "gmm"}]},
        "train": {"objective": "gem", "steps": 10}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.n_samples, 5000);
        assert_eq!(c.sir, SirConfig::default());
        match &c.model.layers[0] {
            LayerConfig::Dif { k, init, em_iters, .. } => {
                assert_eq!((*k, *init, *em_iters), (4, DifInit::Gmm, 200));
            }
            other => panic!("unexpected layer {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        let bad = MINIMAL.replace("\"steps\": 10", "\"steps\": \"ten\"");
        let msg = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(msg.contains("train.steps"), "{msg}");
        let bad = MINIMAL.replace("\"K\": 4", "\"K\": 4, \"widht\": 3");
        let msg = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(msg.contains("model.layers[0]"), "{msg}");
        let bad = MINIMAL.replace("\"steps\": 10", "\"steps\": 10, \"seed\": 3");
        let msg = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(msg.contains("train.seed"), "{msg}");
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn layer_checks() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        assert!(check_layers(&c, "fit-vde", true).is_ok());
        assert!(check_layers(&c, "fit-vi", false).is_err());
        c.model.layers.push(LayerConfig::Dif {
            k: 2,
            weightnet: WeightNetConfig::default(),
            init: DifInit::Prior,
            em_iters: 1,
        });
        assert!(check_layers(&c, "fit-vde", true).is_err());
        c.model.layers.swap(0, 1);
        assert!(check_layers(&c, "fit-vde", true).is_err());
        c.model.layers = vec![
            LayerConfig::Coupling { hidden: None },
            LayerConfig::Dif {
                k: 2,
                weightnet: WeightNetConfig::default(),
                init: DifInit::Data,
                em_iters: 1,
            },
        ];
        assert!(check_layers(&c, "fit-vde", true).is_ok());
    }
}
