//! Named parameter storage shared by supernets and derived networks.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::ConvSpec;
use crate::tensor::{Tape, Tensor, Var};

/// Operation weights `w` versus the two kinds of architecture logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Weight,
    Alpha,
    Beta,
}

impl ParamGroup {
    pub fn is_arch(self) -> bool {
        matches!(self, ParamGroup::Alpha | ParamGroup::Beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names are unique; re-registering panics since
    /// it always indicates a construction bug.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        id
    }

    /// Conv weight, uniform in `±1/sqrt(fan_in)`.
    pub fn add_conv_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        spec: &ConvSpec,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (spec.fan_in() as f64).sqrt();
        self.add(
            name,
            ParamGroup::Weight,
            Tensor::uniform(&spec.weight_shape(), bound, rng),
        )
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self, pred: impl Fn(ParamGroup) -> bool) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| pred(p.group))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn count_elements(&self, pred: impl Fn(ParamGroup) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(p.group))
            .map(|p| p.value.len())
            .sum()
    }

    /// Puts every parameter on `tape`; those whose group passes `trainable`
    /// become differentiable leaves, the rest constants.
    pub fn bind(&self, tape: &Tape, trainable: impl Fn(ParamGroup) -> bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(p.group) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bindings { vars }
    }

    /// Copies every same-named, same-shaped parameter of `other` in `group`.
    /// Returns the number of parameters copied.
    pub fn copy_from(&mut self, other: &ParamStore, group: ParamGroup) -> usize {
        let mut copied = 0;
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            if let Some(src) = other.find(&p.name).map(|id| other.value(id)) {
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Parameters of one store bound to one tape, indexed by [`ParamId`].
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
