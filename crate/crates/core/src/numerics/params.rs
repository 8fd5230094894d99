use std::collections::BTreeMap;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors with gradients of matching shape.
///
/// Iteration order is the lexicographic order of names, which keeps
/// optimizer updates and checkpoints deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return invalid(format!("duplicate parameter name `{name}`"));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name, ParamEntry { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.grad)
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self.entry_mut(name)?;
        if e.value.shape() != value.shape() {
            return shape_err(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                e.value.shape(),
                value.shape()
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        self.entry_mut(name)?.grad.axpy(1.0, g)
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.values().all(|e| e.grad.is_finite())
    }
}
