//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once created. Every operation builds a new node
//! whose backward closure returns the gradient for each parent. Calling
//! [`Tensor::backward`] on a scalar loss walks the graph in reverse
//! creation order and accumulates gradients into every `requires_grad`
//! node.

mod bn;
mod conv;
pub mod ops;

pub use bn::{batch_norm_eval, batch_norm_train};
pub use conv::conv2d;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Gradient function: given the output's data and incoming gradient,
/// return one optional gradient buffer per parent (same order as `parents`).
type BackwardFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a node in the differentiation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn assert_finite(op: &str, data: &[f64]) {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        panic!("non-finite value {} produced by op `{op}` at index {pos}", data[pos]);
    }
}

impl Tensor {
    fn make(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
        op: &str,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        assert_finite(op, &data);
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    /// Leaf tensor. Gradients accumulate into it when `requires_grad`.
    pub fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor::make(shape.to_vec(), data, requires_grad, vec![], None, "leaf")
    }

    /// Constant leaf (no gradient ever flows into it).
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::leaf(shape, data, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[1], vec![v])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
        op: &str,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::make(shape, data, true, parents, Some(backward), op)
        } else {
            Tensor::make(shape, data, false, vec![], None, op)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode gradient evaluation from a scalar loss.
    ///
    /// Walks the reachable subgraph in reverse creation order, so the
    /// result is deterministic for identical graphs.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Collect reachable grad-requiring nodes.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        // Creation order is a topological order: parents always have smaller ids.
        nodes.sort_by_key(|n| std::cmp::Reverse(n.0.id));

        self.accumulate_grad(&[1.0]);
        for node in &nodes {
            let g = match node.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            if let Some(back) = &node.0.backward {
                let parent_grads = back(&node.0.data, &g);
                debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        if p.requires_grad() {
                            assert_finite("backward", &pg);
                            p.accumulate_grad(&pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
