//! Named weight storage shared by the encoders and the attention stack.

use std::collections::{BTreeMap, HashMap};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Weights keyed by dotted path (`ast.0.spatial.wq`), iterated in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing weight `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Records every weight on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Binding { vars }
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("missing weight `{name}`")))
    }

    /// Collects per-weight gradients; weights the loss never touched get zeros.
    pub fn gradients(&self, store: &ParamStore, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(k, v)| {
                let g = self
                    .vars
                    .get(k)
                    .and_then(|&var| grads.take(var))
                    .unwrap_or_else(|| ArrayD::zeros(v.raw_dim()));
                (k.clone(), g)
            })
            .collect()
    }
}

pub(crate) fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub(crate) fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

pub(crate) fn ones(shape: &[usize]) -> Tensor {
    ArrayD::ones(IxDyn(shape))
}
