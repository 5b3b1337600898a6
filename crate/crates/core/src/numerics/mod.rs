//! Parameter storage, the adaptive-moment optimizer, the learning-rate
//! schedule, checkpoint IO and the finite-difference gradient checker.
//!
//! Gradients for the recurrent models are hand-derived (BPTT) in the model
//! modules; the contract they must satisfy lives here in [`grad_check`].

pub mod linalg;

pub mod checkpoint;
mod gradcheck;

pub use checkpoint::{load_checkpoint, write_checkpoint, Sidecar};
pub use gradcheck::grad_check;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Initialization scheme for one tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on \[-a, a\]. `Uniform(0.0)` zero-fills (used for biases).
    Uniform(f64),
    /// Normal with std 1/sqrt(fan_in).
    ScaledNormal { fan_in: usize },
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named parameter tensors with matching gradient buffers and a step counter.
///
/// Gradients live in a parallel array so that backward passes can read
/// weights while writing gradients (see [`ParamStore::split_mut`]).
#[derive(Debug, Clone)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    pub step: u64,
}

impl ParamStore {
    pub fn empty() -> ParamStore {
        ParamStore {
            tensors: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    /// Builds a store from `(name, shape, scheme)` triples, drawing in list
    /// order so the result is deterministic given the rng seed.
    pub fn init<R: Rng>(spec: &[(&str, Vec<usize>, Init)], rng: &mut R) -> Result<ParamStore> {
        let mut store = ParamStore::empty();
        for (name, shape, scheme) in spec {
            let n: usize = shape.iter().product();
            let mut data = vec![0.0; n];
            match scheme {
                Init::Uniform(a) => {
                    if *a > 0.0 {
                        for v in data.iter_mut() {
                            *v = rng.random_range(-a..=*a);
                        }
                    }
                }
                Init::ScaledNormal { fan_in } => {
                    let std = 1.0 / (*fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("valid std");
                    for v in data.iter_mut() {
                        *v = normal.sample(rng);
                    }
                }
            }
            store.push(Tensor {
                name: name.to_string(),
                shape: shape.clone(),
                data,
            })?;
        }
        Ok(store)
    }

    pub fn push(&mut self, t: Tensor) -> Result<usize> {
        if self.index.contains_key(&t.name) {
            return Err(Error::config(format!("duplicate tensor name {}", t.name)));
        }
        let idx = self.tensors.len();
        self.index.insert(t.name.clone(), idx);
        self.grads.push(vec![0.0; t.data.len()]);
        self.tensors.push(t);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn data(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    pub fn data_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].data
    }

    pub fn grad(&self, i: usize) -> &[f64] {
        &self.grads[i]
    }

    pub fn grad_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.grads[i]
    }

    /// Simultaneous read access to parameters and write access to gradients.
    pub fn split_mut(&mut self) -> (&[Tensor], &mut [Vec<f64>]) {
        (&self.tensors, &mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let total: f64 = self.grads.iter().map(|g| linalg::dot(g, g)).sum();
        let norm = total.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in self.grads.iter_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }

    /// Flattened copy of all parameters, in tensor order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Flattened copy of all gradients, in tensor order.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for g in &self.grads {
            out.extend_from_slice(g);
        }
        out
    }
}

/// Adaptive-moment optimizer state (one pair of moment buffers per tensor).
#[derive(Debug, Clone)]
pub struct OptState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl OptState {
    pub fn new(params: &ParamStore, lr: f64) -> OptState {
        OptState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected adaptive-moment update; gradients are zeroed afterward.
pub fn opt_step(params: &mut ParamStore, state: &mut OptState) -> Result<()> {
    for (i, t) in params.tensors.iter().enumerate() {
        if params.grads[i].iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite gradient in tensor {}",
                t.name
            )));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.tensors.len() {
        let g = &mut params.grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = &mut params.tensors[i].data;
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= state.lr * mh / (vh.sqrt() + state.eps);
            g[j] = 0.0;
        }
    }
    params.step += 1;
    for t in &params.tensors {
        if t.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite parameter in tensor {} after step",
                t.name
            )));
        }
    }
    Ok(())
}

/// Step-decay schedule: `base_lr · 0.8^⌊epoch/3⌋`.
pub fn lr_at(epoch: usize, base_lr: f64) -> f64 {
    base_lr * 0.8f64.powi((epoch / 3) as i32)
}
