use std::collections::HashMap;
use std::sync::Arc;

use crate::{AutogradError, Float, Result, Tensor};

/// Handle to a named tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
    trainable: bool,
}

/// Owns every named weight of a model, trainable or frozen.
///
/// Tapes borrow values through `Arc`, so a forward pass never copies weights.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(AutogradError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value: Arc::new(value),
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; clones the tensor only if a live tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(AutogradError::Shape(format!(
                "param {} has shape {:?}, got {:?}",
                self.name(id),
                cur.shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Total scalar count, optionally restricted to trainable tensors.
    pub fn numel(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| !trainable_only || e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Copy of the store converted to another precision.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: Arc::new(e.value.cast()),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
