use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub tensor: Tensor,
    pub gradient: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(tensor: Tensor, trainable: bool) -> Self {
        let gradient = Tensor::zeros(tensor.shape());
        Parameter {
            tensor,
            gradient,
            trainable,
        }
    }
}

/// Ordered collection of named parameters. The order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.params.push(Parameter::new(tensor, trainable));
        self.names.push(name.into());
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(0.0);
        }
    }

    /// Adds `grads` into the stored gradients of trainable parameters.
    pub fn accumulate(&mut self, grads: &[(ParamId, Tensor)]) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            for (dst, src) in p.gradient.data_mut().iter_mut().zip(g.data()) {
                *dst += src;
            }
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Flattened values in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    /// Overwrites every parameter from a flat buffer laid out as in [`ParamStore::flat_values`].
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.numel()],
                actual: vec![values.len()],
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor
                .data_mut()
                .copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Global L2 norm of trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.gradient.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}
