use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::rng::Rng;
use crate::numeric::tape::{Gradients, Tape, Var};
use crate::numeric::tensor::Tensor;

/// Named parameter tensors of one model, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape`. With `trainable = false` all leaves
    /// are constants, otherwise each follows its own `requires_grad` flag.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let var = if trainable || !t.requires_grad() {
                    tape.leaf(t)
                } else {
                    tape.leaf(&t.clone().with_requires_grad(false))
                };
                (name.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds the gradients of every bound, trainable tensor into its grad slot.
    pub fn accumulate(&mut self, bound: &BoundParams, grads: &Gradients) -> Result<()> {
        for (name, var) in &bound.vars {
            if let (Some(g), Some(t)) = (grads.get(*var), self.tensors.get_mut(name)) {
                if t.requires_grad() {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Multiplies every stored gradient by `factor` (batch averaging).
    pub fn scale_grads(&mut self, factor: f64) {
        self.tensors.values_mut().for_each(|t| t.scale_grad(factor));
    }

    /// Every value of every tensor equal, bit for bit.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.values()
                        .iter()
                        .zip(b.values())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Tape variables for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], values)
        .expect("shape matches")
        .with_requires_grad(true)
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_requires_grad(true)
}

pub fn ones_param(shape: &[usize]) -> Tensor {
    Tensor::filled(shape, 1.0).with_requires_grad(true)
}
