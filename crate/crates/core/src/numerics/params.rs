//! Named parameter collection shared by the encoder, quantizer, and heads.

use std::collections::BTreeMap;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::tape::{Gradients, Tape, VarId};
use super::tensor::Tensor;
use crate::error::Result;

/// Named tensors in lexicographic order. The ordering makes optimizer
/// updates, serialization, and random initialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Load every parameter onto a tape as a leaf, keeping the name -> id map.
    pub fn load(&self, tape: &mut Tape) -> TapeParams {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.tensors {
            ids.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        TapeParams { ids }
    }

    /// All values finite in every tensor.
    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }
}

/// Handle for one tape's view of a `ParamSet`.
pub struct TapeParams {
    ids: BTreeMap<String, VarId>,
}

impl TapeParams {
    pub fn id(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not on tape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VarId)> {
        self.ids.iter()
    }
}

/// Adam state per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub slots: BTreeMap<String, AdamState>,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let slots = params
            .iter()
            .map(|(name, t)| (name.clone(), AdamState::new(t.shape(), config)))
            .collect();
        Self { slots, config }
    }

    /// Apply one Adam update to every parameter that has a gradient and is
    /// not filtered out. Frozen parameters are skipped entirely: no state
    /// advance, no write.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        tape_params: &TapeParams,
        grads: &Gradients,
        lr: f64,
        frozen: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, &id) in tape_params.iter() {
            if frozen(name) {
                continue;
            }
            let tensor = params.get_mut(name);
            let grad = grads.get_or_zeros(id, tensor.shape());
            let state = self
                .slots
                .get_mut(name)
                .unwrap_or_else(|| panic!("no optimizer slot for {name}"));
            adam_step(tensor, &grad, state, lr)?;
        }
        Ok(())
    }
}
