use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Backward rule for an operation defined outside this module.
///
/// `grad_out` has the shape of `output`. The returned vector has one entry
/// per input; `None` means no gradient flows into that input.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&Tensor],
        output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
    grad: Option<Vec<f64>>,
}

/// Define-by-run record of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs have
/// smaller ids than the node itself and a reverse sweep visits consumers
/// before producers.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.value();
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &v.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, None)
    }

    pub(crate) fn push(&self, value: Tensor, requires_grad: bool, op: Option<Op>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op: if requires_grad { op } else { None },
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }


    pub fn value(&self, var: Var<'_>) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[var.id].value)
    }

    pub fn requires_grad(&self, var: Var<'_>) -> bool {
        self.nodes.borrow()[var.id].requires_grad
    }

    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Records an externally defined operation.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var<'t>> {
        if let Some(index) = output.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                index,
            });
        }
        let rg = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(output, rg, Some(Op::Custom { inputs: ids, op })))
    }

    /// Reverse sweep from a scalar. Gradients accumulate into every
    /// `requires_grad` node until [`Tape::zero_grad`] is called.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if !root.value.is_scalar() {
                return Err(Error::NotScalar(root.value.shape().to_vec()));
            }
            if !root.requires_grad {
                return Err(Error::Detached);
            }
            grads[loss.id] = Some(vec![1.0]);

            for id in (0..n).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if let Some(op) = &node.op {
                    for (input, contribution) in op.backward(&g, &node.value, &nodes) {
                        if !nodes[input].requires_grad {
                            continue;
                        }
                        match &mut grads[input] {
                            Some(acc) => {
                                for (a, c) in acc.iter_mut().zip(&contribution) {
                                    *a += c;
                                }
                            }
                            slot @ None => *slot = Some(contribution),
                        }
                    }
                }
                grads[id] = Some(g);
            }
        }

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&g) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(*self)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    /// Same value, cut off from every gradient path.
    pub fn detach(&self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }
}
