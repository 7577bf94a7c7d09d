use std::collections::HashMap;

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<S> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t.with_grad()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Overwrites the values of an existing parameter.
    pub fn set(&mut self, name: &str, data: &[S]) -> Result<()> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))?;
        if t.len() != data.len() {
            return Err(Error::config(format!(
                "parameter '{name}' has {} values, got {}",
                t.len(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Adds the gradients of this store's parameters found in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients<S>) -> Result<()> {
        for (name, g) in grads.params() {
            if let (Some(g), Some(&i)) = (g, self.index.get(name)) {
                self.entries[i].1.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Flattened copy of all parameter values.
    pub fn flatten(&self) -> Vec<S> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ParameterStore::flatten`].
    pub fn unflatten(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::config("flat parameter vector has the wrong length"));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn flat_grad(&self) -> Vec<S> {
        self.entries
            .iter()
            .flat_map(|(_, t)| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![S::zero(); t.len()],
            })
            .collect()
    }
}
