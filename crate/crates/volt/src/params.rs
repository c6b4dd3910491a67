//! Named parameter tensors with deterministic iteration order.

use indexmap::IndexMap;

use crate::error::{Result, VoltError};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered map name → tensor. Insertion order is the iteration order, which
/// makes checkpoints, optimizer sweeps, and gradient checks reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(VoltError::config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| VoltError::config(format!("unknown parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| VoltError::config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), &e.tensor))
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    entries: IndexMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Grads::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Elementwise accumulation; shapes must match entry-for-entry.
    pub fn accumulate(&mut self, other: &Grads) -> Result<()> {
        for (name, g) in other.iter() {
            match self.entries.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(VoltError::shape(format!(
                            "gradient shape mismatch for {name}"
                        )));
                    }
                    crate::tensor::add_assign(acc, g);
                }
                None => {
                    self.entries.insert(name.to_string(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.entries.values_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
}
