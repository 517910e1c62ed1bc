//! Dense tensors with tape-free reverse-mode differentiation.
//!
//! Every tensor produced by an operation on a gradient-tracking input keeps
//! a handle to its parents and a closure computing their adjoints. Node ids
//! increase monotonically in creation order, so sorting the reachable nodes by
//! descending id replays the recorded primitives in reverse.

mod nn;
mod ops;
mod scalar;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use nn::{BatchNormStats, NormMode};
pub use scalar::Scalar;
pub(crate) use scalar::gemm;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Adjoint rule: `(grad_out, out_data, parents) -> per-parent gradient`.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &[S], &[Tensor<S>]) -> Vec<Option<Vec<S>>>>;

struct GradFn<S: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<S>>,
    backward: BackwardFn<S>,
}

struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    grad_fn: Option<GradFn<S>>,
}

/// Dense row-major n-dimensional array. Cloning is cheap (shared handle).
pub struct Tensor<S: Scalar = f64> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.grad_fn.as_ref().map(|g| g.op))
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn leaf(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                grad_fn: None,
            }),
        }
    }

    /// Build the result of a primitive. The adjoint closure is kept only when
    /// some parent tracks gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}");
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            parents,
            backward,
        });
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                grad_fn,
            }),
        }
    }

    /// Constant tensor. Every extent must be positive.
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Rank {
                op: "new",
                expected: "positive extents",
                got: shape.to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Gradient-tracking leaf.
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.with_grad())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn scalar(v: S) -> Self {
        Self::leaf(Vec::new(), vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![v; n], false)
    }

    /// Fresh leaf sharing nothing with `self`, tracking gradients.
    pub fn with_grad(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), true)
    }

    /// Stop-gradient: same values, no history.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Name of the primitive that produced this tensor, `None` for leaves.
    pub fn op(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.op)
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<S>>> {
        let g = self.node.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn take_grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub fn ptr_eq(&self, other: &Tensor<S>) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    /// Primitives reachable from `self` through gradient-tracking edges,
    /// in recording order.
    pub fn record(&self) -> Vec<&'static str> {
        let mut nodes = self.reachable();
        nodes.reverse();
        nodes.iter().filter_map(|t| t.op()).collect()
    }

    /// Reachable gradient-tracking nodes, newest first.
    fn reachable(&self) -> Vec<Tensor<S>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.node.id) {
                continue;
            }
            if let Some(gf) = &t.node.grad_fn {
                stack.extend(gf.parents.iter().cloned());
            }
            out.push(t);
        }
        out.sort_by(|a, b| b.node.id.cmp(&a.node.id));
        out
    }

    /// Accumulate `d self / d x` into `x.grad` for every gradient-tracking
    /// ancestor `x`. `self` must hold exactly one element.
    pub fn backward(&self) -> Result<()> {
        self.backward_traced().map(|_| ())
    }

    /// As [`backward`](Self::backward), returning the primitives visited in
    /// the order their adjoints ran.
    pub fn backward_traced(&self) -> Result<Vec<&'static str>> {
        if self.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: "a scalar loss",
                got: self.shape().to_vec(),
            });
        }
        let mut visited = Vec::new();
        if !self.requires_grad() {
            return Ok(visited);
        }
        let nodes = self.reachable();
        let mut pending: HashMap<u64, Vec<S>> = HashMap::new();
        pending.insert(self.node.id, vec![S::one()]);
        for t in nodes {
            let Some(g) = pending.remove(&t.node.id) else {
                continue;
            };
            if let Some(gf) = &t.node.grad_fn {
                visited.push(gf.op);
                let contributions = (gf.backward)(&g, &t.node.data, &gf.parents);
                debug_assert_eq!(contributions.len(), gf.parents.len(), "{}", gf.op);
                for (p, c) in gf.parents.iter().zip(contributions) {
                    let Some(c) = c else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(c.len(), p.numel(), "{} adjoint size", gf.op);
                    match pending.get_mut(&p.node.id) {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(p.node.id, c);
                        }
                    }
                }
            }
            let mut slot = t.node.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }
        Ok(visited)
    }
}

/// Elementwise max-abs difference between two equally sized tensors.
pub fn max_abs_diff<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).abs())
        .fold(0.0, f64::max)
}
