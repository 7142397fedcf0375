//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`]s during a forward
//! pass. [`Graph::backward`] walks the tape in reverse and returns the
//! gradients of all leaves. Graphs are single-use: build one per step.
//!
//! In half-precision mode every recorded value and every propagated gradient
//! is rounded through IEEE binary16, while arithmetic inside a kernel runs in
//! f32. Ops that are numerically sensitive (loss reductions) opt out through
//! [`Graph::record_full`].

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::Tensor;

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    half: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.value().shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn half_precision() -> Self {
        Self { nodes: RefCell::default(), half: true }
    }

    pub fn is_half(&self) -> bool {
        self.half
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Arc::new(value), false)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Arc::new(value), true)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let value = if self.half {
            let mut v = (*value).clone();
            v.round_to_half();
            Arc::new(v)
        } else {
            value
        };
        self.push(Node { value, parents: Vec::new(), backward: None, requires_grad })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub(crate) fn record<'g>(
        &'g self,
        mut value: Tensor,
        parents: &[Var<'g>],
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        if self.half {
            value.round_to_half();
        }
        self.record_full(value, parents, backward)
    }

    pub(crate) fn record_full<'g>(
        &'g self,
        value: Tensor,
        parents: &[Var<'g>],
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let backward: Option<BackwardFn> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward,
            requires_grad,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagate from a scalar (single-element) root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let shape = root.value().shape().to_vec();
        self.backward_with(root, Tensor::ones(&shape))
    }

    /// Back-propagate an explicit output cotangent.
    pub fn backward_with(&self, root: Var<'_>, seed: Tensor) -> Gradients {
        assert!(std::ptr::eq(root.graph, self), "root belongs to another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.shape(), seed.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(mut pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                if self.half {
                    pg.round_to_half();
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }
}
