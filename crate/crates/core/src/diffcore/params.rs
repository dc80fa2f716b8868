use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::graph::{Grads, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    /// Registers a tensor with entries drawn from N(0, std²).
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f32,
        rng: &mut R,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0f32, std).map_err(|e| Error::invalid(e.to_string()))?;
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))?;
        self.insert(name, t)
    }

    pub fn insert_full(&mut self, name: impl Into<String>, shape: &[usize], v: f32) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape.to_vec(), v)?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Turns gradient tracking on for exactly the parameters selected by `pred`.
    pub fn set_trainable(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            t.set_requires_grad(pred(n));
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(_, n, _)| n)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// SHA-256 over every name, shape and value, in registration order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            t.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Fingerprint restricted to parameters whose name starts with `prefix`.
    pub fn fingerprint_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            if n.starts_with(prefix) {
                h.update(n.as_bytes());
                t.hash_into(&mut h);
            }
        }
        hex::encode(h.finalize())
    }
}

/// Maps parameters onto graph leaves lazily, one leaf per parameter per graph.
///
/// A parameter used several times in a forward pass shares one leaf, so its
/// gradient accumulates inside the graph.
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    overrides: BTreeMap<ParamId, Var>,
    frozen: bool,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binder {
            store,
            bound: vec![None; store.len()],
            overrides: BTreeMap::new(),
            frozen: false,
        }
    }

    /// Binder that records every parameter as a constant.
    pub fn frozen(store: &'s ParamStore) -> Self {
        let mut b = Self::new(store);
        b.frozen = true;
        b
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Routes `id` to an existing graph node instead of a fresh leaf.
    pub fn bind_to(&mut self, id: ParamId, var: Var) {
        self.overrides.insert(id, var);
        self.bound[id.0] = Some(var);
    }

    pub fn bind<T: Real>(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = g.leaf(t, t.requires_grad() && !self.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound, trainable parameter, in id order.
    pub fn collect<T: Real>(&self, g: &Graph<T>, grads: &Grads<T>) -> Vec<(ParamId, Vec<f32>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if self.overrides.contains_key(&ParamId(i)) || !g.requires_grad(v) {
                    return None;
                }
                grads.get_f32(v).map(|gr| (ParamId(i), gr))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_leaf_accumulates() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        store.get_mut(w).set_requires_grad(true);
        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(&store);
        let a = b.bind(&mut g, w);
        let a2 = b.bind(&mut g, w);
        assert_eq!(a, a2);
        let s = g.mul(a, a2).unwrap();
        let s = g.sum(s).unwrap();
        let grads = g.backward(s).unwrap();
        let got = b.collect(&g, &grads);
        assert_eq!(got, vec![(w, vec![2.0, 4.0])]);
    }

    #[test]
    fn frozen_params_produce_no_grads() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(2.0)).unwrap();
        let mut g = Graph::<f32>::new();
        let mut b = Binder::new(&store);
        let v = b.bind(&mut g, w);
        let x = g.variable(vec![1], vec![3.0]).unwrap();
        let y = g.mul(v, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(b.collect(&g, &grads).is_empty());
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(0.0)).unwrap();
        assert!(store.insert("a", Tensor::scalar(0.0)).is_err());
    }
}
