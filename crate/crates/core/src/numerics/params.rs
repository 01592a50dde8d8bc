use rand::{Rng, RngExt};

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrites every value with a draw from `U(-bound, bound)`, giving
    /// zero-initialized weights a generic nonzero state.
    pub fn randomize<R: Rng + ?Sized>(&mut self, bound: f64, rng: &mut R) {
        for t in &mut self.tensors {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..=bound));
        }
    }

    /// Replaces the values of `id`, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.len() != data.len() {
            return Err(Error::shape("set_data", t.shape(), &[data.len()]));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}
