//! Dense f64 tensors, named parameter storage and the gradient tape.

mod checkpoint;
mod gradcheck;
mod lstm;
mod tape;

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry, CheckpointHeader};
pub use gradcheck::grad_check;
pub use lstm::{lstm_cell, LstmParams, LstmWeights};
pub use tape::{sigmoid, softmax_values, Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim("tensor", shape, &[values.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: true,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: None,
            requires_grad: true,
        }
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.values {
            *v = rng.gen_range(-bound..=bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        let slot = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        slot.iter_mut().zip(g).for_each(|(s, g)| *s += g);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the tape; tensors with `requires_grad` become
    /// differentiable leaves, the rest constants.
    pub fn bind(&self, tape: &Tape) -> Result<Bound> {
        self.bind_with(tape, true)
    }

    /// Places every tensor on the tape as a constant.
    pub fn bind_frozen(&self, tape: &Tape) -> Result<Bound> {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &Tape, trainable: bool) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable && t.requires_grad {
                    tape.param(&t.shape, t.values.clone())
                } else {
                    tape.constant(&t.shape, t.values.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Adds the adjoints of bound leaves into each tensor's grad slot.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients) {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
        norm
    }

    /// Plain SGD: `value -= lr * grad` for every trainable tensor.
    pub fn sgd_step(&mut self, lr: f64) {
        for t in &mut self.tensors {
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = &t.grad {
                t.values.iter_mut().zip(g).for_each(|(v, g)| *v -= lr * g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }
}

/// Tape handles for every tensor in a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests;
