use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean Gaussian with the given variance.
    Gaussian { variance: f32 },
}

impl Init {
    /// He initialization for layers followed by ReLU: variance `2 / fan_in`.
    pub fn he(fan_in: usize) -> Self {
        Init::Gaussian { variance: 2.0 / fan_in as f32 }
    }

    /// Variance `1 / fan_in`, used for layers without a ReLU.
    pub fn lecun(fan_in: usize) -> Self {
        Init::Gaussian { variance: 1.0 / fan_in as f32 }
    }
}

/// Ordered collection of named, trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new tensor under `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor.with_requires_grad(true)));
        Ok(())
    }

    /// Creates and registers a tensor drawn from `init`.
    pub fn init<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> Result<()> {
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Gaussian { variance } => {
                let normal = Normal::new(0.0f32, variance.sqrt())
                    .map_err(|e| Error::InvalidConfig(format!("bad init variance: {e}")))?;
                Tensor::from_fn(shape, |_| normal.sample(rng))
            }
        };
        self.insert(name, tensor)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.entries[i].1)
    }

    pub(crate) fn get_index(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub(crate) fn get_index_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Multiplies every accumulated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f32) {
        for (_, t) in self.entries.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Replaces every tensor with the same-named tensor of `other`, which
    /// must carry exactly the same names and shapes.
    pub fn load_from(&mut self, other: Vec<(String, Tensor)>) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.entries.len()
            )));
        }
        for (name, t) in other {
            let slot = self
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.with_requires_grad(true);
        }
        Ok(())
    }

    pub fn to_named_vec(&self) -> Vec<(String, Tensor)> {
        self.entries.clone()
    }
}
