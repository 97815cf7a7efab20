//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value node in a computation graph: operations
//! take tensors and return new tensors holding both the result and a record of
//! how it was produced. Calling [`Tensor::backward`] on a scalar walks that
//! graph once in reverse topological order and accumulates gradients into
//! every node that `requires_grad`. The graph is rebuilt on every forward
//! pass, so control flow (ablation modes, refresh steps) needs no special
//! casing.
//!
//! Storage is a flat row-major `Vec<f64>` plus an explicit shape. There is no
//! broadcasting beyond scalar scaling and the explicit row-bias op; every
//! backward rule is a direct transcription of the matching forward.
//!
//! Mutation is deliberately narrow: gradients accumulate, and leaf values may
//! be rewritten through [`Tensor::set_values`] (optimizer updates, prototype
//! refreshes) between backward passes. Everything else is frozen at
//! construction.

mod autograd;
mod ops;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use thiserror::Error;

/// Guard added inside every `log` that feeds a loss.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} cannot hold {len} values")]
    ShapeLen {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for bound {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("log: input {min} is at or below -{eps} (outside the guarded domain)")]
    LogDomain { min: f64, eps: f64 },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// How a tensor was produced; inputs are held by reference count, so the
/// graph stays alive exactly as long as something downstream of it does.
pub(crate) enum Op {
    Leaf,
    Matmul { a: Tensor, b: Tensor },
    Transpose { x: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Relu { x: Tensor },
    Exp { x: Tensor },
    Log { x: Tensor },
    Neg { x: Tensor },
    Scale { x: Tensor, factor: f64 },
    Sigmoid { x: Tensor },
    SoftmaxRows { x: Tensor },
    Sum { x: Tensor },
    GatherRows { x: Tensor, indices: Vec<usize> },
    AddRowBias { x: Tensor, bias: Tensor },
    ConcatRows { parts: Vec<Tensor> },
    ConcatCols { a: Tensor, b: Tensor },
    OuterRows { a: Tensor, b: Tensor },
    GradReverse { x: Tensor, coeff: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Neg { .. } => "neg",
            Op::Scale { .. } => "scale",
            Op::Sigmoid { .. } => "sigmoid",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::Sum { .. } => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::OuterRows { .. } => "outer_rows",
            Op::GradReverse { .. } => "grad_reverse",
        }
    }

    /// Inputs in a fixed order (used by the topological sort).
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![a, b]
            }
            Op::Transpose { x }
            | Op::Relu { x }
            | Op::Exp { x }
            | Op::Log { x }
            | Op::Neg { x }
            | Op::Scale { x, .. }
            | Op::Sigmoid { x }
            | Op::SoftmaxRows { x }
            | Op::Sum { x }
            | Op::GatherRows { x, .. }
            | Op::GradReverse { x, .. } => vec![x],
            Op::AddRowBias { x, bias } => vec![x, bias],
            Op::ConcatRows { parts } => parts.iter().collect(),
            Op::ConcatCols { a, b } => vec![a, b],
            Op::OuterRows { a, b } => vec![a, b],
        }
    }
}

struct Inner {
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// Shared handle to a graph node. `clone` is shallow: both handles refer to
/// the same node, values, and gradient buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.op.name())
            .finish()
    }
}

fn checked_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Result<Tensor> {
        if checked_len(&shape) != values.len() {
            return Err(TensorError::ShapeLen { op: op.name(), shape, len: values.len() });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                values: RefCell::new(values),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        })
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Tensor> {
        Tensor::build(shape, values, requires_grad, op)
    }

    /// Constant leaf; gradients never flow into or through it.
    pub fn constant(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        Tensor::build(shape, values, false, Op::Leaf)
    }

    /// Trainable leaf; `backward` populates its gradient.
    pub fn parameter(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        Tensor::build(shape, values, true, Op::Leaf)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = checked_len(&shape);
        Tensor::build(shape, vec![0.0; len], false, Op::Leaf).expect("zeros is well formed")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![1], vec![value], false, Op::Leaf).expect("scalar is well formed")
    }

    /// Row-major matrix from rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            values.extend_from_slice(r);
        }
        Tensor::constant(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        checked_len(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow of the flat row-major values.
    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.inner.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar {:?}", self.shape());
        self.inner.values.borrow()[0]
    }

    pub(crate) fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.inner.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Rank { op, expected: "a 2-d tensor", shape: self.inner.shape.clone() }),
        }
    }

    /// Node identity (pointer-based); stable for the node's lifetime.
    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn op(&self) -> &Op {
        &self.inner.op
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.op, Op::Leaf)
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Rewrite the values of a leaf. Callers (optimizer steps, prototype
    /// refreshes) must only do this between backward passes: live graphs
    /// referencing this leaf see the new values.
    pub fn set_values(&self, new_values: &[f64]) {
        assert!(self.is_leaf(), "set_values is only valid on leaf tensors");
        assert_eq!(new_values.len(), self.len(), "set_values length mismatch");
        self.inner.values.borrow_mut().copy_from_slice(new_values);
    }

    /// Value-equal constant severed from the graph; no gradient flows
    /// through (or into) the result.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.to_vec(), false, Op::Leaf)
            .expect("detach of a valid tensor is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_len_checked() {
        let err = Tensor::constant(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeLen { .. }));
    }

    #[test]
    fn non_finite_rejected_at_construction() {
        let err = Tensor::constant(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn detach_is_severed_and_idempotent() {
        let x = Tensor::parameter(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let d = x.detach();
        assert!(!d.requires_grad());
        assert!(d.is_leaf());
        assert_eq!(d.to_vec(), x.to_vec());
        let dd = d.detach();
        assert_eq!(dd.to_vec(), d.to_vec());
        assert!(!dd.requires_grad());
    }

    #[test]
    fn detach_copies_values() {
        let x = Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap();
        let d = x.detach();
        x.set_values(&[5.0, 6.0]);
        assert_eq!(d.to_vec(), vec![1.0, 2.0]);
    }
}
