//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Moves every tensor of `other` into `self`, replacing equal names.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Total scalar count of tensors whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Marks every parameter under `prefix` as non-trainable.
    pub fn freeze(&mut self, prefix: &str) {
        if !self.frozen.iter().any(|p| p == prefix) {
            self.frozen.push(prefix.to_string());
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// SHA-256 over the names, shapes and exact bit patterns of all tensors
    /// under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
