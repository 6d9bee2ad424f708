use std::cell::{Ref, RefCell};
use std::fmt;

use super::array::{Precision, Tensor};
use crate::error::{Error, Result};

/// Inputs handed to an op's backward closure.
pub(crate) struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to this op's output.
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Which inputs need a gradient; closures may return `None` for the rest.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// reverse topological order for the backward sweep.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    precision: Precision,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}({}, {:?})", self.id, n.op, n.value.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::Single)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf; receives a gradient on [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push("leaf", value, Vec::new(), true, None)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push("constant", value, Vec::new(), false, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(
        &self,
        op: &'static str,
        mut value: Tensor,
        inputs: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        self.precision.round_slice(value.data_mut());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, inputs, requires_grad, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records an op. The backward closure is kept only when some input
    /// participates in differentiation.
    pub(crate) fn record<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var<'t>],
        backward: BackwardFn,
    ) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "mixing vars from different tapes");
                nodes[v.id].requires_grad
            })
        };
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(op, value, ids, requires_grad, requires_grad.then_some(backward))
    }

    /// Records a value that blocks gradient flow: forward-equal to `x`,
    /// contributing nothing upstream.
    pub(crate) fn detached<'t>(&'t self, x: Var<'t>) -> Var<'t> {
        let value = x.value();
        self.push("stop_gradient", value, vec![x.id], false, None)
    }

    /// Reverse sweep from a one-element `loss`. Gradients of earlier backward
    /// calls on this tape are discarded.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.is_finite() {
            let op = nodes[..=loss.id]
                .iter()
                .find(|n| !n.value.is_finite())
                .map(|n| n.op)
                .unwrap_or(root.op);
            return Err(Error::NonFinite { op: op.to_string() });
        }

        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.inputs.iter().map(|&i| &nodes[i].value).collect(),
                output: &node.value,
                needs: needs.clone(),
            };
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(mut g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    nodes[input].value.shape(),
                    "grad shape from op {}",
                    node.op
                );
                self.precision.round_slice(g.data_mut());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[id] = Some(grad);
        }
        // only differentiable leaves keep their gradient
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if n.backward.is_some() || !n.requires_grad {
                *g = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient accumulated on a differentiable leaf by the last backward call.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Borrow of the underlying value. Do not record ops while holding it.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    /// Forward-identical copy that contributes zero gradient upstream.
    pub fn stop_gradient(self) -> Var<'t> {
        self.tape.detached(self)
    }
}
