//! Dense row-major `f64` tensors with tape-free reverse-mode autodiff.
//!
//! Every operation that touches a tensor requiring gradients records a
//! node holding its inputs and a one-shot backward closure. Calling
//! [`Tensor::backward`] on a scalar traces those nodes into a topologically
//! ordered [`Graph`] and replays it once in reverse.

mod autograd;
mod elementwise;
mod index;
mod linalg;
mod nn;
mod reduce;
mod shape;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use autograd::{
    grad_check, grad_check_many, grad_check_report, no_grad, GradCheckReport, Graph, GraphEntry, NoGradGuard,
};
pub use elementwise::softplus_scalar;
pub use index::IndexTensor;
pub(crate) use index::{desc_then_index, topk_row};
pub(crate) use linalg::gemm;
pub use nn::Activation;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Input gradients produced by a node, aligned with its inputs.
pub type InputGrads = Vec<Option<Vec<f64>>>;
pub(crate) type BackwardFn = Box<dyn FnOnce(&[f64]) -> InputGrads>;

pub(crate) struct Node {
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Inner {
    id: usize,
    op: &'static str,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: RefCell<Option<Node>>,
    consumed: Cell<bool>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(op: &'static str, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            op,
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            node: RefCell::new(node),
            consumed: Cell::new(false),
        }))
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "new",
                format!("shape {:?} holds {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self::make("leaf", shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "param",
                format!("shape {:?} holds {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self::make("leaf", shape.to_vec(), data, true, None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::make("leaf", vec![], vec![v], false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::make("leaf", shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::make("leaf", vec![n, n], data, false, None)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..numel(shape)).map(|_| normal.sample(rng)).collect();
        Self::make("leaf", shape.to_vec(), data, false, None)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Self::make("leaf", shape.to_vec(), data, false, None)
    }

    /// Record the result of an operation. A node is attached only when
    /// gradients are enabled and some input requires them.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        backward: impl FnOnce(&[f64]) -> InputGrads + 'static,
    ) -> Self {
        let track = autograd::grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            let node = Node {
                inputs,
                backward: Box::new(backward),
            };
            Self::make(op, shape, data, true, Some(node))
        } else {
            Self::make(op, shape, data, false, None)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn op(&self) -> &'static str {
        self.0.op
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::dim(
                "item",
                format!("expected one element, shape {:?}", self.shape()),
            ));
        }
        Ok(self.0.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op == "leaf"
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Overwrite the values of a leaf in place (optimizer updates, finite differences).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Argument("set_data on a non-leaf tensor".into()));
        }
        if data.len() != self.numel() {
            return Err(Error::dim(
                "set_data",
                format!("expected {} values, got {}", self.numel(), data.len()),
            ));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        debug_assert!(self.is_leaf());
        f(&mut self.0.data.borrow_mut());
    }

    /// Copy of the values with no graph attached.
    pub fn detach(&self) -> Tensor {
        Self::make("leaf", self.shape().to_vec(), self.to_vec(), false, None)
    }

    /// Fresh leaf sharing no history, flagged to accumulate gradients.
    pub fn detach_param(&self) -> Tensor {
        Self::make("leaf", self.shape().to_vec(), self.to_vec(), true, None)
    }

    pub(crate) fn take_node(&self) -> Option<Node> {
        self.0.node.borrow_mut().take()
    }

    pub(crate) fn has_node(&self) -> bool {
        self.0.node.borrow().is_some()
    }

    pub(crate) fn mark_consumed(&self) {
        self.0.consumed.set(true);
    }

    pub(crate) fn is_consumed(&self) -> bool {
        self.0.consumed.get()
    }

    pub(crate) fn node_inputs(&self) -> Vec<Tensor> {
        self.0
            .node
            .borrow()
            .as_ref()
            .map(|n| n.inputs.clone())
            .unwrap_or_default()
    }

    /// Maximum absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape("max_abs_diff", self.shape(), other.shape()));
        }
        let a = self.data();
        let b = other.data();
        Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Normalize a possibly negative dimension index.
pub(crate) fn norm_dim(op: &'static str, dim: isize, rank: usize) -> Result<usize> {
    let d = if dim < 0 { dim + rank as isize } else { dim };
    if d < 0 || d as usize >= rank {
        return Err(Error::dim(op, format!("dim {dim} invalid for rank {rank}")));
    }
    Ok(d as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(strides(t.shape()), vec![3, 1]);
    }

    #[test]
    fn set_data_rejects_interior_nodes() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let q = p.scale(2.0);
        assert!(q.set_data(vec![0.0, 0.0]).is_err());
        p.set_data(vec![3.0, 4.0]).unwrap();
        assert_eq!(p.to_vec(), vec![3.0, 4.0]);
    }
}
