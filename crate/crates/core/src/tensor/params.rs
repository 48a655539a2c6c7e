use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{HlfpError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Momentum buffer of the optimizer.
    pub velocity: Option<Tensor>,
}

/// Gradients keyed by tensor name.
pub type Grads = BTreeMap<String, Tensor>;

/// Named learnable tensors plus non-learnable buffers (running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param { value, velocity: None });
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| HlfpError::MissingParameter(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| HlfpError::MissingParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| HlfpError::MissingParameter(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| HlfpError::MissingParameter(name.to_string()))
    }

    /// Parameter or buffer.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .or_else(|| self.buffers.get(name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.buffers.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    /// Every stored tensor in name order.
    pub fn tensors(&self) -> Vec<(&str, &Tensor)> {
        let mut all: Vec<(&str, &Tensor)> = self
            .params
            .iter()
            .map(|(k, p)| (k.as_str(), &p.value))
            .chain(self.buffers.iter().map(|(k, v)| (k.as_str(), v)))
            .collect();
        all.sort_by(|a, b| a.0.cmp(b.0));
        all
    }

    pub fn num_params(&self) -> u64 {
        self.params.values().map(|p| p.value.len() as u64).sum()
    }

    /// Overwrites a parameter or buffer of the same name and shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = match self.params.get_mut(name) {
            Some(p) => &mut p.value,
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| HlfpError::MissingParameter(name.to_string()))?,
        };
        if slot.shape() != value.shape() {
            return Err(HlfpError::Shape(format!(
                "{name}: stored {:?}, given {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Keeps only the tensors whose name satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
        self.buffers.retain(|k, _| keep(k));
    }
}
