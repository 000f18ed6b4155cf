//! Named parameter store with per-entry optimizer state and JSON
//! serialization.
//!
//! File format (version 1): `{"format_version":1,"entries":[{"name":...,
//! "shape":[...],"data":[...],"trainable":bool},...]}`. Entries are sorted by
//! name so serialization is byte-deterministic.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

pub const PARAM_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub(crate) struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Debug)]
struct Entry {
    tensor: Tensor,
    trainable: bool,
    adam: Option<AdamState>,
}

/// All tensors of a model, keyed by name. Running statistics live here too,
/// as non-trainable entries, so a saved file restores the full model state.
#[derive(Clone, Debug, Default)]
pub struct ModelParameters {
    entries: BTreeMap<String, Entry>,
}

impl ModelParameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.insert_with_trainable(name, tensor, true);
    }

    pub fn insert_non_trainable(&mut self, name: &str, tensor: Tensor) {
        self.insert_with_trainable(name, tensor, false);
    }

    fn insert_with_trainable(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.entries.insert(
            name.to_string(),
            Entry {
                tensor,
                trainable,
                adam: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    /// Names of trainable entries, in sorted order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Update a non-trainable running statistic by exponential moving
    /// average: stat <- (1 - momentum) * stat + momentum * batch_value.
    pub fn update_running_stat(&mut self, name: &str, batch_value: &[f64], momentum: f64) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown running stat {name}"));
        for (s, b) in entry.tensor.data_mut().iter_mut().zip(batch_value) {
            *s = (1.0 - momentum) * *s + momentum * b;
        }
    }

    pub(crate) fn tensor_and_adam_mut(
        &mut self,
        name: &str,
    ) -> Option<(&mut Tensor, &mut AdamState)> {
        let entry = self.entries.get_mut(name)?;
        let n = entry.tensor.len();
        let adam = entry.adam.get_or_insert_with(|| AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        Some((&mut entry.tensor, adam))
    }

    /// Step count of a parameter's optimizer state (0 before any update).
    pub fn step_count(&self, name: &str) -> u64 {
        self.entries
            .get(name)
            .and_then(|e| e.adam.as_ref())
            .map(|a| a.step)
            .unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let file = ParamFile {
            format_version: PARAM_FORMAT_VERSION,
            entries: self
                .entries
                .iter()
                .map(|(name, e)| ParamEntry {
                    name: name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    data: e.tensor.data().to_vec(),
                    trainable: e.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_string(&file)
            .map_err(|e| TensorError::InvalidParameterFile(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| TensorError::InvalidParameterFile(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| TensorError::InvalidParameterFile(e.to_string()))?;
        let file: ParamFile = serde_json::from_str(&json)
            .map_err(|e| TensorError::InvalidParameterFile(e.to_string()))?;
        if file.format_version != PARAM_FORMAT_VERSION {
            return Err(TensorError::InvalidParameterFile(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        let mut params = Self::new();
        for e in file.entries {
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(TensorError::InvalidParameterFile(format!(
                    "entry {} shape/data mismatch",
                    e.name
                )));
            }
            params.insert_with_trainable(&e.name, Tensor::new(e.shape, e.data), e.trainable);
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    format_version: u32,
    entries: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    trainable: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        let mut p = ModelParameters::new();
        p.insert("w", Tensor::new(vec![2, 2], vec![0.1, -0.25, 1e-17, 3.5]));
        p.insert_non_trainable("bn_mean", Tensor::new(vec![2], vec![0.0, 1.0]));
        p.save(&path).unwrap();
        let q = ModelParameters::load(&path).unwrap();
        assert_eq!(q.get("w").unwrap(), p.get("w").unwrap());
        assert!(!q.is_trainable("bn_mean"));
        assert!(q.is_trainable("w"));
    }

    #[test]
    fn load_rejects_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"format_version":99,"entries":[]}"#).unwrap();
        assert!(ModelParameters::load(&path).is_err());
    }
}
