//! Named parameter storage and its binding into a graph.

use std::collections::HashMap;

use crate::error::{AbsaError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// Ordered collection of named tensors. Insertion order is the canonical
/// order used by optimizers and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| AbsaError::Lookup(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(AbsaError::Lookup(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total scalar count, optionally restricted to names with a prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind<'a>(&'a self, graph: &mut Graph<T>) -> Bound<'a, T> {
        let vars = self.entries.iter().map(|(_, t)| graph.param(t.clone())).collect();
        Bound { store: self, vars }
    }

    /// Registers every parameter as a frozen leaf (inference).
    pub fn bind_frozen<'a>(&'a self, graph: &mut Graph<T>) -> Bound<'a, T> {
        let vars = self.entries.iter().map(|(_, t)| graph.constant(t.clone())).collect();
        Bound { store: self, vars }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }
}

/// Graph handles for a [`ParamStore`], aligned with its order.
pub struct Bound<'a, T: Element> {
    store: &'a ParamStore<T>,
    vars: Vec<Var>,
}

impl<T: Element> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| AbsaError::Lookup(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
