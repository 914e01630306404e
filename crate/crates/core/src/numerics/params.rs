use std::collections::BTreeMap;

use super::rng::Rng;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Result, SscError};
use crate::scalar::Real;

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }
}

/// Tape handles for every tensor of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor.requires_grad());
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn insert_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut Rng) {
        let t = Tensor::from_fn(shape, |_| T::of(std * rng.normal()));
        self.insert(name, t);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_full(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        self.insert(name, Tensor::full(shape, T::of(value)));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t)))
                .collect(),
        }
    }

    /// Records every tensor as a constant (inference without gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t)))
                .collect(),
        }
    }

    /// Adds the gradients of the bound leaves into each tensor's accumulator.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (name, var) in bound.iter() {
            if let (Some(t), Some(g)) = (self.tensors.get_mut(name), grads.get(*var)) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces values from `other`, checking that names and shapes agree.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (name, t) in &mut self.tensors {
            let src = other
                .tensors
                .get(name)
                .ok_or_else(|| SscError::Shape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: vec![],
                })?;
            if src.shape() != t.shape() {
                return Err(SscError::Shape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

/// Adam optimiser with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = tensor.grad().map(<[T]>::to_vec) else { continue };
            let n = grad.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let data = tensor.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            tensor.zero_grad();
        }
    }

    /// Moment buffers as tensors, for checkpointing.
    pub fn state(&self, params: &ParamSet<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, t) in params.iter() {
            for (tag, buf) in [("m", &self.first), ("v", &self.second)] {
                if let Some(b) = buf.get(name) {
                    out.push((format!("adam.{tag}.{name}"), Tensor::from_parts(t.shape().to_vec(), b.clone())));
                }
            }
        }
        out
    }

    pub fn restore(&mut self, step: u64, entries: &BTreeMap<String, Tensor<T>>) {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (key, t) in entries {
            if let Some(name) = key.strip_prefix("adam.m.") {
                self.first.insert(name.to_string(), t.data().to_vec());
            } else if let Some(name) = key.strip_prefix("adam.v.") {
                self.second.insert(name.to_string(), t.data().to_vec());
            }
        }
    }
}
