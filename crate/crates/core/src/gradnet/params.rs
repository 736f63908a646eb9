use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{config, health, Result};

/// A named, shaped block of 32-bit parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Identifies one tensor of one store; used to route gradients back.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: Arc<str>,
    pub index: usize,
}

/// Owns the parameters of one model component.
///
/// Every store has a group name (e.g. `encoder`, `cost_critic`) which must be
/// unique within a model; gradients are keyed by `(group, tensor index)`.
/// The version counter is bumped by every in-place update.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    group: Arc<str>,
    tensors: Vec<Tensor>,
    version: u64,
}

impl ParamStore {
    pub fn new(group: &str) -> Self {
        ParamStore {
            group: Arc::from(group),
            tensors: Vec::new(),
            version: 0,
        }
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    /// Same tensors under another group name, e.g. for a target copy.
    pub fn clone_as(&self, group: &str) -> ParamStore {
        ParamStore {
            group: Arc::from(group),
            tensors: self.tensors.clone(),
            version: 0,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Registers a tensor and returns its index.
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<usize> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(config(format!(
                "tensor {}/{name}: shape {shape:?} needs {numel} values, got {}",
                self.group,
                data.len()
            )));
        }
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(config(format!("duplicate tensor {}/{name}", self.group)));
        }
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(self.tensors.len() - 1)
    }

    /// Registers a tensor filled from `U(-bound, bound)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f32,
        rng: &mut R,
    ) -> Result<usize> {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        self.add(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            group: self.group.clone(),
            index,
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(health(format!(
                    "{}/{}[{i}] is {}",
                    self.group, t.name, t.data[i]
                )));
            }
        }
        Ok(())
    }

    /// Feeds group, names, shapes and raw little-endian data into `hasher`.
    pub fn hash_into(&self, hasher: &mut Sha256) {
        hasher.update(self.group.as_bytes());
        for t in &self.tensors {
            hasher.update(t.name.as_bytes());
            for d in &t.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                hasher.update(v.to_le_bytes());
            }
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex::encode(h.finalize())
    }
}

/// Gradients produced by a backward pass, accumulated in 64-bit floats.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Vec<f64>>,
}

impl Gradients {
    pub(crate) fn insert(&mut self, key: ParamKey, grad: Vec<f64>) {
        match self.map.get_mut(&key) {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => {
                self.map.insert(key, grad);
            }
        }
    }

    pub fn get(&self, key: &ParamKey) -> Option<&[f64]> {
        self.map.get(key).map(Vec::as_slice)
    }

    /// Gradient for tensor `index` of `store`, or `None` if it was not reached.
    pub fn of(&self, store: &ParamStore, index: usize) -> Option<&[f64]> {
        self.get(&store.key(index))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &[f64])> {
        self.map.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Largest absolute gradient entry over every tensor of `group`.
    /// Unreached tensors count as exact zeros.
    pub fn max_abs_in_group(&self, group: &str) -> f64 {
        self.map
            .iter()
            .filter(|(k, _)| &*k.group == group)
            .flat_map(|(_, v)| v.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|v| v.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.map
            .values_mut()
            .flat_map(|v| v.iter_mut())
            .for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().flat_map(|v| v.iter()).all(|v| v.is_finite())
    }

    pub fn merge(&mut self, other: Gradients) {
        for (k, v) in other.map {
            self.insert(k, v);
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
