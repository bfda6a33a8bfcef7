//! Named parameter storage and per-step tape binding.
//!
//! Parameters live outside any tape as plain `f64` buffers. Each training
//! step binds the whole store onto a fresh tape ([`ParamStore::bind`]),
//! builds the loss, and reads gradients back through the binding; the
//! optimizer then updates the raw buffers in place. Evaluation paths use
//! [`ParamStore::bind_const`] to skip tape bookkeeping entirely.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to one named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

struct Entry {
    name: String,
    shape: Vec<usize>,
    value: Vec<f64>,
}

/// Ordered, name-addressable collection of trainable parameters.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique; the value length must
    /// match the shape.
    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::shape(format!(
                "parameter {name:?}: {} values for shape {:?}",
                value.len(),
                shape
            )));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    /// All ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Bind every parameter as a tracked leaf on `tape`, in registration
    /// order (so node ids are deterministic run to run).
    pub fn bind(&self, tape: &Tape) -> Binding {
        let tensors = self
            .entries
            .iter()
            .map(|e| tape.leaf(Arc::new(e.value.clone()), e.shape.clone()))
            .collect();
        Binding { tensors }
    }

    /// Bind every parameter as an untracked constant (evaluation paths).
    pub fn bind_const(&self) -> Binding {
        let tensors = self
            .entries
            .iter()
            .map(|e| Tensor::from_vec(e.value.clone(), &e.shape))
            .collect();
        Binding { tensors }
    }
}

/// Tensors for every parameter of a store, on one tape (or untracked).
pub struct Binding {
    tensors: Vec<Tensor>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}
