//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and, when any
//! input requires a gradient, a closure that maps the output gradient to
//! input gradients. `Tape::backward` walks the nodes in reverse creation
//! order, which is a valid topological order by construction.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward closures; for inference.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf. Gradients are tracked iff `value.requires_grad()`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let requires_grad = value.requires_grad();
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Record a shared leaf without copying it.
    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let requires_grad = self.grad_enabled && requires_grad;
        self.push_node(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        })
    }

    /// Record a leaf that always tracks its gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value.with_requires_grad(true))
    }

    /// Record a leaf that never tracks a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value.with_requires_grad(false))
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push<'t, F>(&'t self, value: Tensor, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        self.push_node(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Gradients of the scalar `root` with respect to every tracked leaf.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return shape_err(
                "backward",
                format!("root must be a scalar, got shape {:?}", root_value.shape()),
            );
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        if !nodes[root.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(Tensor::ones(root_value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| &*nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Owned copy of the value.
    pub fn to_tensor(&self) -> Tensor {
        let mut t = (*self.value()).clone();
        t.set_requires_grad(false);
        t
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}
