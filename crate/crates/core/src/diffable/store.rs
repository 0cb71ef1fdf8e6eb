use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{DifError, Result};

pub const PARAMS_VERSION: &str = "dif-lab/params/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape as a matrix: 1-D slices are row vectors.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[0], s[1..].iter().product()),
        }
    }
}

/// Flat vector of real parameters with named, shaped slices.
///
/// Slices are appended in registration order, so offsets are disjoint and
/// the total length is the sum of slice sizes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    values: Vec<f64>,
    registry: Vec<ParamSlot>,
    index: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(DifError::DimensionMismatch {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.registry
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Vec<f64>) -> Result<&ParamSlot> {
        if self.index.contains_key(name) {
            return Err(DifError::DuplicateParameter(name.to_string()));
        }
        let expected: usize = shape.iter().product();
        if init.len() != expected {
            return Err(DifError::ParameterLength {
                name: name.to_string(),
                expected,
                got: init.len(),
            });
        }
        let slot = ParamSlot {
            name: name.to_string(),
            offset: self.values.len(),
            shape: shape.to_vec(),
        };
        self.values.extend(init);
        self.index.insert(name.to_string(), self.registry.len());
        self.registry.push(slot);
        Ok(self.registry.last().expect("just pushed"))
    }

    pub fn register_zeros(&mut self, name: &str, shape: &[usize]) -> Result<&ParamSlot> {
        let n = shape.iter().product();
        self.register(name, shape, vec![0.0; n])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn slot(&self, name: &str) -> Result<&ParamSlot> {
        self.index
            .get(name)
            .map(|&i| &self.registry[i])
            .ok_or_else(|| DifError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let slot = self.slot(name)?;
        Ok(&self.values[slot.offset..slot.offset + slot.len()])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let slot = self.slot(name)?.clone();
        Ok(&mut self.values[slot.offset..slot.offset + slot.len()])
    }

    pub fn set(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let dst = self.get_mut(name)?;
        if dst.len() != values.len() {
            return Err(DifError::ParameterLength {
                name: name.to_string(),
                expected: dst.len(),
                got: values.len(),
            });
        }
        dst.copy_from_slice(values);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let slot = self.slot(name)?;
        let (r, c) = slot.matrix_shape();
        Ok(Tensor::new(r, c, self.get(name)?.to_vec()))
    }

    /// Copies every slice whose name also exists in `other`, checking lengths.
    pub fn load_from(&mut self, other: &ParameterStore) -> Result<()> {
        for slot in self.registry.clone() {
            let src = other.get(&slot.name)?;
            self.set(&slot.name, src)?;
        }
        Ok(())
    }

    /// Adds independent uniform noise in `[-scale, scale]` to every value.
    pub fn jitter<R: rand::Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for v in &mut self.values {
            *v += rng.random_range(-scale..=scale);
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut params = serde_json::Map::new();
        for slot in &self.registry {
            params.insert(
                slot.name.clone(),
                serde_json::json!({
                    "shape": slot.shape,
                    "values": &self.values[slot.offset..slot.offset + slot.len()],
                }),
            );
        }
        serde_json::json!({ "version": PARAMS_VERSION, "params": params })
    }

    /// Rebuilds a store from its JSON form. Slices are registered in name
    /// order; callers that need a particular layout should register their own
    /// slots and use [`ParameterStore::load_from`].
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            shape: Vec<usize>,
            values: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct Blob {
            version: String,
            params: BTreeMap<String, Entry>,
        }
        let blob: Blob = serde_json::from_value(value.clone())?;
        if blob.version != PARAMS_VERSION {
            return Err(DifError::Version(blob.version));
        }
        let mut store = Self::new();
        for (name, entry) in blob.params {
            store.register(&name, &entry.shape, entry.values)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}
