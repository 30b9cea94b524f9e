use std::sync::atomic::{AtomicU32, Ordering};

use rand_distr::{Distribution, Normal};

use super::RngState;
use crate::tensor::{Shape, Tensor};

/// A trainable array together with its Adam slots.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    /// Optimizer steps applied so far.
    pub t: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(shape),
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f32),
    Constant(f32),
}

static NEXT_TAG: AtomicU32 = AtomicU32::new(1);

/// Parameters and non-trainable state buffers (batch-norm running
/// statistics) of one network.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tag: u32,
    frozen: bool,
    params: Vec<Parameter>,
    buffers: Vec<(String, Tensor)>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            frozen: false,
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub(crate) fn tag(&self) -> u32 {
        self.tag
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen stores enter tapes as constants, so no gradient is computed
    /// for them.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Shape, init: Init, rng: &mut RngState) -> ParamId {
        let value = match init {
            Init::Constant(c) => Tensor::full(shape, c),
            Init::Normal(std) => {
                let dist = Normal::new(0.0f32, std).expect("finite std");
                let data = (0..shape.len()).map(|_| dist.sample(rng)).collect();
                Tensor::from_vec(shape, data).expect("shape matches")
            }
        };
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.buffers.push((name.into(), value));
        self.buffers.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffer(&self, index: usize) -> &Tensor {
        &self.buffers[index].1
    }

    pub fn buffer_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.buffers[index].1
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.buffers
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
            && self.buffers.iter().all(|(_, b)| b.all_finite())
    }

    /// Overwrite values, slots and buffers from another store of identical
    /// layout, keeping this store's identity.
    pub fn copy_state_from(&mut self, other: &ParamStore) {
        debug_assert_eq!(self.params.len(), other.params.len());
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value = b.value.clone();
            a.grad = b.grad.clone();
            a.m = b.m.clone();
            a.v = b.v.clone();
            a.t = b.t;
        }
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            a.1 = b.1.clone();
        }
    }
}
