use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConditionalDifLayer, DifLayer, DifStack, Layer};
use crate::diffable::ParameterStore;
use crate::error::{DifError, Result};
use crate::maps::AffineCouplingMap;

pub const MODEL_VERSION: &str = "dif-lab/model/v1";

/// A stack together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub stack: DifStack,
    pub params: ParameterStore,
}

/// A conditional layer together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalModel {
    pub layer: ConditionalDifLayer,
    pub params: ParameterStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dif(DifLayer),
    Coupling(AffineCouplingMap),
    ConditionalDif(ConditionalDifLayer),
}

/// On-disk form shared by both model kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_dim: Option<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Unconditional(Model),
    Conditional(ConditionalModel),
}

impl Model {
    pub fn to_file(&self) -> ModelFile {
        let layers = self
            .stack
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dif(d) => LayerSpec::Dif(d.clone()),
                Layer::Coupling(c) => LayerSpec::Coupling(c.clone()),
            })
            .collect();
        ModelFile {
            version: MODEL_VERSION.into(),
            dim: self.stack.dim,
            covariate_dim: None,
            layers,
            params: self.params.to_json(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        match SavedModel::load(path)? {
            SavedModel::Unconditional(m) => Ok(m),
            SavedModel::Conditional(_) => Err(DifError::InvalidArgument(
                "expected an unconditional model, found a conditional one".into(),
            )),
        }
    }
}

impl ConditionalModel {
    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            version: MODEL_VERSION.into(),
            dim: self.layer.dim,
            covariate_dim: Some(self.layer.covariate_dim),
            layers: vec![LayerSpec::ConditionalDif(self.layer.clone())],
            params: self.params.to_json(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        match SavedModel::load(path)? {
            SavedModel::Conditional(m) => Ok(m),
            SavedModel::Unconditional(_) => Err(DifError::InvalidArgument(
                "expected a conditional model, found an unconditional one".into(),
            )),
        }
    }
}

fn write_json(path: &Path, file: &ModelFile) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(file)?)?;
    Ok(())
}

impl SavedModel {
    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.version != MODEL_VERSION {
            return Err(DifError::Version(file.version));
        }
        let params = ParameterStore::from_json(&file.params)?;
        if let [LayerSpec::ConditionalDif(layer)] = file.layers.as_slice() {
            return Ok(SavedModel::Conditional(ConditionalModel {
                layer: layer.clone(),
                params,
            }));
        }
        let layers = file
            .layers
            .into_iter()
            .map(|l| match l {
                LayerSpec::Dif(d) => Ok(Layer::Dif(d)),
                LayerSpec::Coupling(c) => Ok(Layer::Coupling(c)),
                LayerSpec::ConditionalDif(_) => Err(DifError::InvalidArgument(
                    "a conditional layer cannot be stacked".into(),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SavedModel::Unconditional(Model {
            stack: DifStack::new(file.dim, layers)?,
            params,
        }))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }
}
