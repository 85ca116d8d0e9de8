use std::collections::HashMap;
use std::ops::Index;

use crate::error::{CoraError, Result};
use crate::numerics::checkpoint;
use crate::numerics::graph::{Gradients, Graph, Var};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of parameter tensors.
///
/// Models keep [`ParamId`]s in their layout structs and bind the whole store to
/// a [`Graph`] once per forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Graph variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for t in &mut self.tensors {
            t.requires_grad = on;
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t)).collect())
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Adds the gradients of a backward pass into each tensor's `grad`.
    pub fn collect_grads(&mut self, grads: &Gradients, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = grads.get(v) {
                match &mut t.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => t.grad = Some(g.to_vec()),
                }
            }
        }
    }

    /// Replaces values with those of `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(CoraError::Checkpoint(format!(
                "parameter names differ ({} vs {} entries)",
                self.names.len(),
                other.names.len()
            )));
        }
        for ((name, a), b) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(CoraError::Checkpoint(format!(
                    "{name}: shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self.iter())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut store = Self::new();
        for (name, tensor) in checkpoint::decode(bytes)? {
            if store.index.contains_key(&name) {
                return Err(CoraError::Checkpoint(format!("duplicate tensor {name}")));
            }
            store.add(name, tensor);
        }
        Ok(store)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn checksum(&self) -> String {
        checkpoint::sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoraError::MissingArtifact {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Loads `path` into a store whose layout must match `self`.
    pub fn load_into(&mut self, path: &std::path::Path) -> Result<()> {
        let loaded = Self::load(path)?;
        self.copy_values_from(&loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collect_grads_accumulates_across_passes() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        for _ in 0..2 {
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let s = g.sum(b[w]).unwrap();
            let grads = g.backward(s);
            store.collect_grads(&grads, &b);
        }
        assert_eq!(store.get(w).grad.as_deref(), Some(&[2.0, 2.0][..]));
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::ones(&[3]));
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let s = g.sum(b[w]).unwrap();
        let grads = g.backward(s);
        store.collect_grads(&grads, &b);
        assert!(store.get(w).grad.is_none());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::ones(&[3]));
        let before = store.checksum();
        assert_eq!(before, store.clone().checksum());
        store.get_mut(w).data_mut()[1] = 1.5;
        assert_ne!(before, store.checksum());
    }
}
