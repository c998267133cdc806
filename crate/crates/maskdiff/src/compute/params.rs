//! Named, ordered parameter collections.

use std::collections::HashMap;

use super::scalar::Scalar;
use super::tape::GradientMap;
use super::tensor::Tensor;
use crate::error::{err_fmt, Result};

pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Frozen entries are stored and checkpointed but skipped by the
    /// optimizer (used for `positional = sinusoidal-frozen`).
    pub trainable: bool,
}

/// Insertion-ordered set of named parameter tensors. The order is the
/// canonical one for gradient maps, optimizer state and checkpoints.
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> usize {
        self.insert_with(name, tensor, true)
    }

    pub fn insert_with(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> usize {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let idx = self.entries.len();
        self.by_name.insert(name.to_string(), idx);
        self.entries.push(ParamEntry { name: name.to_string(), tensor, trainable });
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].tensor
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.entries[idx].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        self.index_of(name)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| err_fmt!(Contract, "unknown parameter {name}"))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for e in &self.entries {
            out.insert_with(&e.name, e.tensor.cast(), e.trainable);
        }
        out
    }

    /// Materialize a dense gradient list aligned with this set (zeros for
    /// parameters the loss never reached).
    pub fn dense_grads(&self, map: &GradientMap<T>) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| map.get_or_zeros(i, e.tensor.shape()))
            .collect()
    }
}

impl<T: Scalar> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.clone(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
