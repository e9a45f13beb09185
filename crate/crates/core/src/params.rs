//! Ordered, named tensor collection shared by every trainable model.
//!
//! Insertion order is the canonical order: optimizers walk it, checkpoints
//! serialize it, and gradients are reported in it. Entries flagged
//! non-trainable (running statistics, EMA buffers) are carried through
//! checkpoints but skipped by optimizers.

use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("unknown parameter name {0:?}")]
    Unknown(String),
}

#[derive(Debug, Clone)]
struct Entry<T: Scalar> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamMap<T: Scalar> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamMap<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<(), ParamError> {
        if self.index_of(name).is_some() {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.entries.push(Entry { name: name.to_string(), tensor, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ParamError> {
        self.index_of(name)
            .map(|i| &self.entries[i].tensor)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ParamError> {
        let i = self.index_of(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        Ok(&mut self.entries[i].tensor)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    pub fn tensor(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].tensor
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].tensor
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.entries[index].trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor, e.trainable))
    }

    /// Number of scalar elements across trainable entries.
    pub fn trainable_numel(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    /// Pushes every entry onto the tape; trainable entries require grad.
    /// Returns handles aligned with entry order.
    pub fn leaves(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.tensor.clone(), e.trainable))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamMap<U> {
        ParamMap {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), tensor: e.tensor.cast(), trainable: e.trainable })
                .collect(),
        }
    }
}
