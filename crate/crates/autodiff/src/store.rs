use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        self.entries.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    /// Replaces the values of an existing parameter, keeping its gradient slot.
    pub fn set_values(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let t = self
            .entries
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        if t.numel() != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_values",
                lhs: t.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Global L2 norm over every populated gradient.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for t in self.entries.values_mut() {
            if t.grad().is_some() {
                t.grad_mut().iter_mut().for_each(|g| *g *= factor);
            }
        }
    }
}
