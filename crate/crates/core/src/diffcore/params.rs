use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    /// Multiplier on the optimizer learning rate for this tensor.
    pub lr_scale: f64,
    velocity: Option<Tensor<S>>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            lr_scale: 1.0,
            velocity: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::lit(rng.gen_range(-a..=a))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
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

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.params[id.0].lr_scale = scale;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Adds the parameter gradients of the graph's last backward pass.
    pub fn accumulate(&mut self, graph: &Graph<S>) {
        for (id, g) in graph.param_grads() {
            let dst = self.params[id.0].grad.data_mut();
            dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
        }
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    lr_scale: p.lr_scale,
                    velocity: None,
                })
                .collect(),
        }
    }
}

/// Plain stochastic gradient descent with optional momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum }
    }

    /// `p ← p − lr·s·grad` with the tensor's `lr_scale` s (through a velocity
    /// buffer when momentum > 0), then clears gradients. A non-finite
    /// gradient aborts the step before any parameter is touched.
    pub fn step<S: Real>(&self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if let Some(bad) = store.params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        let mu = S::lit(self.momentum);
        for p in &mut store.params {
            let lr = S::lit(lr * p.lr_scale);
            if self.momentum > 0.0 {
                let vel = p.velocity.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
                for ((v, x), &g) in vel
                    .data_mut()
                    .iter_mut()
                    .zip(p.value.data_mut())
                    .zip(p.grad.data())
                {
                    *v = mu * *v + g;
                    *x -= lr * *v;
                }
            } else {
                for (x, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *x -= lr * g;
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Step decay: `initial` for epochs `1..=decay_after`, `decayed` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decayed: f64,
    pub decay_after: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-2,
            decayed: 1e-3,
            decay_after: 20,
        }
    }
}

impl LrSchedule {
    /// Learning rate for a 1-based epoch number.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch <= self.decay_after {
            self.initial
        } else {
            self.decayed
        }
    }
}
