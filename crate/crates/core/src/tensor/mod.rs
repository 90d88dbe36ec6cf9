//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a row-major matrix of `f64` behind a cheaply clonable
//! handle. Ops (see [`ops`]) validate shapes eagerly, reject non-finite
//! results at the op boundary, and attach a backward rule to their output
//! when any input participates in differentiation. [`tape::GradTape`]
//! records the op sequence reaching a scalar root and replays it in
//! reverse to accumulate gradients.
//!
//! Data is immutable after construction: "updating" a parameter means
//! building a new tensor. This keeps recorded graphs valid for their whole
//! lifetime and makes handles safe to share between cache slots and
//! consumers without copies.

pub mod gradcheck;
pub mod ops;
pub mod tape;

pub use tape::GradTape;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

/// Backward rule attached to an op output: the op name, the input handles,
/// and a closure mapping the upstream gradient to one gradient per input
/// (`None` for inputs that do not require gradients).
pub(crate) struct Node {
    pub(crate) op: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

pub(crate) struct TensorInner {
    id: u64,
    rows: usize,
    cols: usize,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Row-major `f64` matrix handle. Cloning copies the handle, not the data.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &(self.rows(), self.cols()))
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.inner.node.as_ref().map(|n| n.op))
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::non_finite(op, format!("element {i} is {v}")));
        }
    }
    Ok(())
}

impl Tensor {
    fn build(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                rows,
                cols,
                data: Rc::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Constant (non-differentiable) tensor from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("{rows}x{cols} needs {} elements, got {}", rows * cols, data.len()),
            ));
        }
        check_finite("from_vec", &data)?;
        Ok(Tensor::build(rows, cols, data, false, None))
    }

    /// Trainable leaf: gradients accumulate here on backward passes.
    pub fn param_from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(rows, cols, data)?;
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                rows: t.rows(),
                cols: t.cols(),
                data: Rc::clone(&t.inner.data),
                requires_grad: true,
                grad: RefCell::new(None),
                node: None,
            }),
        })
    }

    /// Convenience constructor from nested rows (tests and small fixtures).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("from_rows", "ragged rows".to_string()));
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(r, c, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::build(rows, cols, vec![0.0; rows * cols], false, None)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Result<Tensor> {
        Tensor::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::from_vec(1, 1, vec![value])
    }

    pub(crate) fn from_op(
        op: &'static str,
        inputs: &[&Tensor],
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(rows * cols, data.len(), "{op}: bad output buffer");
        check_finite(op, &data)?;
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward,
        });
        Ok(Tensor::build(rows, cols, data, requires_grad, node))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }

    pub fn cols(&self) -> usize {
        self.inner.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    pub fn numel(&self) -> usize {
        self.inner.rows * self.inner.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.inner.data[row * self.inner.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.inner.cols;
        &self.inner.data[row * c..(row + 1) * c]
    }

    /// Value of a 1x1 tensor.
    pub fn value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "value",
                format!("expected 1x1, got {}x{}", self.rows(), self.cols()),
            ));
        }
        Ok(self.inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when this tensor is not the output of a recorded op.
    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.inner.node.as_ref()
    }

    /// Name of the op that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op)
    }

    /// Accumulated leaf gradient (populated by `GradTape::backward`).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Same values, detached from any recorded graph, non-differentiable.
    /// Shares the underlying buffer (no copy).
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                rows: self.rows(),
                cols: self.cols(),
                data: Rc::clone(&self.inner.data),
                requires_grad: false,
                grad: RefCell::new(None),
                node: None,
            }),
        }
    }

    /// Two handles referring to the same tensor object.
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest relative difference between two same-shaped tensors, with the
    /// denominator floored at 1 so near-zero entries compare absolutely.
    pub fn max_rel_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "max_rel_diff",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.data().iter().zip(other.data()) {
            let denom = a.abs().max(b.abs()).max(1.0);
            worst = worst.max((a - b).abs() / denom);
        }
        Ok(worst)
    }

    /// Index of the largest element in one row (ties resolve to the lowest
    /// index, making decode argmax deterministic).
    pub fn argmax_row(&self, row: usize) -> usize {
        let r = self.row(row);
        let mut best = 0;
        for (i, v) in r.iter().enumerate() {
            if *v > r[best] {
                best = i;
            }
        }
        best
    }
}
