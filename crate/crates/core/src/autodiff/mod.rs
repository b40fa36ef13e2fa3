//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order. Values are
//! immutable once recorded. [`Graph::backward`] consumes the graph and walks
//! the tape in exact reverse order, so one graph serves one loss. Gradients
//! are returned as a [`Gradients`] table and added to parameters with
//! [`ParamStore::accumulate`](crate::params::ParamStore::accumulate);
//! accumulation is additive until `zero_grad`.

mod backward;
mod ops;

use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a training-mode batch-norm pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

pub(crate) enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    TransposeLast2(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
}

pub(crate) struct Node {
    pub value: Arc<Tensor>,
    pub op: Op,
    pub requires_grad: bool,
}

/// The operation record of one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never requires gradients; backward information is not kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value), None, false)
    }

    /// A `requires_grad` leaf that is not backed by a stored parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(Arc::new(value), None, rg)
    }

    /// A leaf that reads a stored parameter. Trainable parameters require grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let rg = self.grad_enabled && store.get(id).trainable;
        self.push_leaf(store.shared_value(id), Some(id), rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, param: Option<ParamId>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op result. Inputs decide whether the op is differentiated;
    /// ops outside the gradient path drop their backward state.
    pub(crate) fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf { param: None } };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a one-element `loss`. The graph is consumed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar { shape: loss_shape });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::from_parts(loss_shape, vec![1.0]));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward::propagate(&self.nodes, i, &g, &mut grads)?;
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf { param: Some(id) } if node.requires_grad => params.push((i, id)),
                Op::Leaf { .. } => {}
                _ => grads[i] = None,
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (true, Op::Leaf { .. }, None) = (node.requires_grad, &node.op, &grads[i]) {
                grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), vec![0.0; node.value.numel()]));
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads, params })
    }
}

/// Gradients of every `requires_grad` leaf after a backward pass. Leaves the
/// loss does not depend on hold zeros.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of a leaf recorded in the consumed graph.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient per parameter leaf, in recording order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.params.iter().map(|&(i, id)| (id, self.grads[i].as_ref()))
    }
}

#[cfg(test)]
mod tests;
