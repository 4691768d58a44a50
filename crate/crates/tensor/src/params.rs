//! Named parameter storage and its binding onto a tape.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|t| &**t)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Entries whose name satisfies `keep`, as a new store.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Merge another store into this one, replacing entries with equal names.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Record every parameter as a leaf; gradients are tracked for names
    /// accepted by `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Bound<'t> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf_shared(v.clone(), trainable(k))))
                .collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Bind already-recorded variables under parameter names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients of every tracked parameter, keyed by name.
    pub fn collect_grads(&self, grads: &mut Gradients) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Uniform init in `±sqrt(3 / fan_in) · gain` (variance `gain² / fan_in`).
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f32, rng: &mut R) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f32).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}
