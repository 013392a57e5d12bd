//! Tape-based reverse-mode differentiation.
//!
//! Forward primitives (see `ops.rs`) are methods on [`Tape`]. When the tape
//! records and at least one input is tracked, the primitive appends a node
//! holding its vector-Jacobian product. [`Tape::backward`] consumes the tape
//! and replays the nodes in reverse from a scalar loss.

use std::cell::RefCell;
use std::sync::Arc;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{bail, Result};

pub type NodeId = usize;

/// Vector-Jacobian product: given the output cotangent and a mask of which
/// inputs need a gradient, returns one optional gradient per input.
pub(crate) type Vjp<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    inputs: Vec<Option<NodeId>>,
    vjp: Option<Vjp<T>>,
}

/// A tensor value, optionally tracked on a tape.
#[derive(Clone, Debug)]
pub struct Var<T: Real> {
    value: Arc<Tensor<T>>,
    node: Option<NodeId>,
}

impl<T: Real> Var<T> {
    /// Untracked value; gradients never flow into it.
    pub fn constant(value: Tensor<T>) -> Self {
        Self {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared(&self) -> &Arc<Tensor<T>> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_value(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

/// Append-only record of primitive applications.
pub struct Tape<T> {
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape that never records: forward-only evaluation.
    pub fn inference() -> Self {
        Self {
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a gradient-requiring leaf (a parameter or an input).
    pub fn leaf(&self, value: Arc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: Vec::new(),
            vjp: None,
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    pub fn leaf_tensor(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(Arc::new(value))
    }

    /// Wraps a primitive's output, recording `vjp` when any input is tracked.
    pub(crate) fn push<F>(&self, value: Tensor<T>, inputs: &[&Var<T>], vjp: F) -> Var<T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        if !tracked {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: inputs.iter().map(|v| v.node).collect(),
            vjp: Some(Box::new(vjp)),
        });
        Var {
            value: Arc::new(value),
            node: Some(nodes.len() - 1),
        }
    }

    /// Back-propagates from a single-element `loss`, consuming the tape.
    pub fn backward(self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            bail!(
                Dimension,
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            );
        }
        if !loss.value.is_finite() {
            bail!(Numeric, "non-finite loss {}", loss.value.data()[0]);
        }
        let nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.shape().to_vec(), T::one()));

        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(vjp) = node.vjp.as_ref() else {
                continue;
            };
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.inputs.iter().map(|n| n.is_some()).collect();
            let input_grads = vjp(&out_grad, &mask);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let (Some(input), Some(g)) = (input, g) else {
                    continue;
                };
                match grads[*input].as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    None => grads[*input] = Some(g),
                }
            }
            // Non-leaf gradients are not retained once propagated.
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the loss with respect to tracked leaves.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, or `None` if it is untracked or the loss does not
    /// depend on it.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Like [`Gradients::get`] but substitutes zeros of the right shape.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}
