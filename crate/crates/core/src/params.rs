//! Named parameter storage shared by layers, optimizers and checkpoints.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::Gradients;
use crate::tensor::{Tensor, TensorError};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A stored tensor. Trainable entries are `requires_grad` leaves and own a
/// lazily allocated gradient buffer; the rest are state buffers such as
/// batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub grad: Option<Tensor>,
    pub trainable: bool,
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

    /// Registers a tensor. Names are unique; a duplicate is a construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            grad: None,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_param",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access to a value buffer; clones it if a graph still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    /// Split borrow used by optimizers: the value buffer and its gradient.
    pub(crate) fn value_and_grad(&mut self, id: ParamId) -> (&mut Tensor, Option<&Tensor>) {
        let p = &mut self.params[id.0];
        (Arc::make_mut(&mut p.value), p.grad.as_ref())
    }

    /// Number of learnable scalars (state buffers excluded).
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Adds the gradients of every parameter leaf in a finished backward pass.
    /// Leaves that the loss did not reach receive an explicit zero gradient.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), TensorError> {
        for (id, grad) in grads.param_grads() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            let slot = p.grad.get_or_insert_with(|| {
                Tensor::from_parts(p.value.shape().to_vec(), vec![0.0; p.value.numel()])
            });
            if let Some(g) = grad {
                slot.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Drops every gradient buffer.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Overwrites state buffers with values produced during a training pass.
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) -> Result<(), TensorError> {
        for (id, value) in updates {
            self.set(id, value)?;
        }
        Ok(())
    }
}
