//! Parameter registry and gradient buffers.
//!
//! Parameters are registered once at model construction and addressed by
//! [`ParamId`] afterwards; registration order is the canonical order used by
//! the optimizer and by checkpoints. Gradients live in a separate [`Grads`]
//! buffer aligned with the store, so several per-sample backward passes can
//! each fill their own buffer and be reduced deterministically.

use super::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Learning-rate group a parameter belongs to. Group 0 is the default; the
/// clustering stage puts its head into a separate group with a higher rate.
pub type GroupId = usize;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub group: GroupId,
    /// Frozen parameters are skipped by the optimizer entirely: no update,
    /// no moment change.
    pub frozen: bool,
    /// Whether weight decay applies (true for weight matrices, false for
    /// biases and normalization affine parameters).
    pub decay: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        self.register_in_group(name, value, decay, 0)
    }

    pub fn register_in_group(
        &mut self,
        name: &str,
        value: Tensor,
        decay: bool,
        group: GroupId,
    ) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            group,
            frozen: false,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn meta(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn set_group(&mut self, id: ParamId, group: GroupId) {
        self.params[id.0].group = group;
    }

    /// Total number of scalar values across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            grads: store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Accumulate `delta` into the gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, delta: &Tensor) {
        self.grads[id.0].add_assign(delta);
    }

    /// Merge another buffer into this one (used when reducing per-sample
    /// backward passes; always merge in index order for determinism).
    pub fn merge(&mut self, other: &Grads) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = 0.0;
            }
        }
    }
}
