//! Named parameter storage.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Whether a tensor is optimized (`Weight`) or carried state such as
/// normalization running statistics (`Buffer`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    kind: ParamKind,
}

/// Ordered map from parameter name to a mutable tensor.
///
/// Names follow the dotted convention of the pretrained checkpoints
/// (`layer1.0.conv1.weight`). Iteration order is lexicographic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: &Tensor, kind: ParamKind) -> Result<()> {
        let var = Var::from_tensor(&value.copy()?)?;
        self.entries.insert(name.into(), Entry { var, kind });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.entries
            .get(name)
            .map(|e| &e.var)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    /// The parameter as a graph input. Untracked tensors never receive gradients.
    pub fn tensor(&self, name: &str, track: bool) -> Result<Tensor> {
        let var = self.var(name)?;
        let tracked = track && self.entries[name].kind == ParamKind::Weight;
        Ok(if tracked {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        })
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.var(name)?;
        if var.shape() != value.shape() {
            return Err(Error::Contract(format!(
                "shape mismatch setting `{name}`: {:?} vs {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var, ParamKind)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.var, e.kind))
    }

    pub fn weights(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.iter()
            .filter(|(_, _, k)| *k == ParamKind::Weight)
            .map(|(n, v, _)| (n, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar values in `Weight` entries.
    pub fn num_weights(&self) -> usize {
        self.weights().map(|(_, v)| v.elem_count()).sum()
    }

    /// A copy with fresh storage; later writes to either side are not shared.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, var, kind) in self.iter() {
            out.insert(name, var.as_tensor(), kind)?;
        }
        Ok(out)
    }

    /// Entries whose name starts with `prefix`, with the prefix kept.
    pub fn subset(&self, prefix: &str) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, var, kind) in self.iter().filter(|(n, _, _)| n.starts_with(prefix)) {
            out.insert(name, var.as_tensor(), kind)?;
        }
        Ok(out)
    }

    /// Snapshot of every tensor, detached and copied.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.iter()
            .map(|(n, v, _)| Ok((n.to_string(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.snapshot()?.into_iter().collect();
        candle_core::safetensors::save(&map, path).map_err(|e| Error::CheckpointLoad {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub fn load_safetensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::CheckpointLoad {
            path: path.to_path_buf(),
            reason: "file not found".into(),
        });
    }
    candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::CheckpointLoad {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Kaiming-uniform values for a weight of `shape` with the given fan-in
/// (ReLU gain: bound = sqrt(6 / fan_in)).
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(shape, bound, rng)
}

/// Values drawn uniformly from `[-bound, bound)`.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) as f32 * bound as f32)
        .collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

pub fn constant(shape: &[usize], value: f32) -> Result<Tensor> {
    Ok(Tensor::full(value, shape, &Device::Cpu)?.to_dtype(DType::F32)?)
}
