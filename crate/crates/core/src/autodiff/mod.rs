//! Reverse-mode differentiation over a recorded operation graph.
//!
//! Every differentiable op appends a node holding its output value and a
//! boxed [`Backward`] implementation. [`Graph::backward`] walks the nodes in
//! reverse and hands each op the upstream gradient.

mod ops;
mod params;

pub use ops::MeanAxes;
pub use params::{ParamId, ParamStore};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule of one op.
pub trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in input order. `needs[i]` is false for
    /// inputs that do not require a gradient; the op may return `None` there.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    kinks: Option<DefaultHasher>,
    fault: Option<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            kinks: None,
            fault: None,
        }
    }

    /// Record a hash of every piecewise-branch decision taken in the forward
    /// pass (relu signs, interpolation cells, selected kernel sizes). Two
    /// forward passes with equal signatures lie on the same smooth piece.
    pub fn with_kink_tracking(mut self) -> Self {
        self.kinks = Some(DefaultHasher::new());
        self
    }

    /// Test hook: negate every input gradient produced by ops named `op`.
    pub fn with_fault(mut self, op: impl Into<String>) -> Self {
        self.fault = Some(op.into());
        self
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(|h| h.finish())
    }

    pub fn tracks_kinks(&self) -> bool {
        self.kinks.is_some()
    }

    pub(crate) fn note_kink(&mut self, item: impl Hash) {
        if let Some(h) = self.kinks.as_mut() {
            item.hash(h);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Leaf bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push_leaf(store.value(id).clone(), true, Some(id))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            param,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        op: Box<dyn Backward<T>>,
    ) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {}", op.name());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: if requires_grad { Some(op) } else { None },
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: ls,
                right: Shape::scalar(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let flip = self.fault.as_deref() == Some(op.name());
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((v, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(mut g), true) = (g, *need) else { continue };
                debug_assert_eq!(g.shape(), self.shape(*v), "gradient shape from {}", op.name());
                if flip {
                    g = g.map(|x| -x);
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[v.0] = Some(g),
                }
            }
            // keep gradient for leaves and for inspection of intermediate nodes
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    /// Add the gradients of all parameter leaves into the store's accumulators.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }
}
