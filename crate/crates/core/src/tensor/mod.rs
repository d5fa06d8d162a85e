//! Dense NCHW tensors with reverse-mode automatic differentiation.
//!
//! Tensors are reference-counted handles onto graph nodes. Every operation
//! records its inputs, so calling [`backward`] on a scalar loss accumulates
//! gradients into the leaf tensors created with [`Tensor::variable`]. The
//! element type is generic: `f32` for training, `f64` for gradient checks.

mod autograd;
mod conv;
mod gradcheck;
mod kernels;
mod linalg;
mod op;

pub use autograd::backward;
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckEntry, GradCheckReport};
pub use linalg::{matmul, solve_spd};

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

pub(crate) use op::Op;

/// Element type shared by all kernels. Implemented for `f32` and `f64` only;
/// the two implementations dispatch to the matching BLAS-style GEMM.
pub trait Scalar:
    Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * op(A) * op(B) + beta * C` for row-major matrices described
    /// by explicit row/column strides.
    ///
    /// # Safety
    /// Pointers must cover the `m x k`, `k x n` and `m x n` extents implied by
    /// the strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Logical extents of a tensor, always stored as `[n, c, h, w]`.
///
/// Batched matrices reuse the same container as `[batch, groups, rows, cols]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }
    pub fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }
    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}x{}x{}x{}]",
            self.0[0], self.0[1], self.0[2], self.0[3]
        )
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Errors raised by tensor construction and tensor ops.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operands disagree where the op requires matching extents.
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    /// An argument violates an op precondition (described in `msg`).
    BadArgument { op: &'static str, msg: String },
    /// A linear solve hit a non-positive pivot even after regularization.
    NotSpd { smallest_pivot: f64 },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarLoss { shape: Shape },
    /// A kernel produced or received a NaN/Inf where finiteness is required.
    NonFinite { op: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs} vs {rhs}")
            }
            TensorError::BadArgument { op, msg } => write!(f, "{op}: {msg}"),
            TensorError::NotSpd { smallest_pivot } => write!(
                f,
                "solve_spd: matrix not positive definite (smallest pivot {smallest_pivot:e})"
            ),
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward: expected scalar loss, got {shape}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node<S: Scalar> {
    id: u64,
    shape: Shape,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    /// Leaf that accumulates gradient (a trainable parameter).
    requires_grad: bool,
    /// True if gradients must flow through this node.
    tracked: bool,
    op: Op<S>,
}

/// A reference-counted handle to a node in the computation graph.
///
/// Cloning a `Tensor` is cheap and aliases the same storage.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    pub(crate) node: Rc<Node<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn from_op(shape: Shape, data: Vec<S>, op: Op<S>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        let tracked = op.parents().iter().any(|p| p.node.tracked);
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                tracked,
                op,
            }),
        }
    }

    fn leaf(shape: Shape, data: Vec<S>, requires_grad: bool) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(TensorError::BadArgument {
                op: "leaf",
                msg: format!(
                    "shape {shape} needs {} values, got {}",
                    shape.numel(),
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                tracked: requires_grad,
                op: Op::Leaf,
            }),
        })
    }

    /// Leaf tensor that does not take part in differentiation (input data).
    pub fn constant(shape: Shape, data: Vec<S>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Leaf tensor that accumulates gradient on `backward` (a parameter).
    pub fn variable(shape: Shape, data: Vec<S>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::leaf(shape, vec![S::zero(); shape.numel()], false).expect("sized by construction")
    }

    pub fn full(shape: Shape, v: S) -> Self {
        Self::leaf(shape, vec![v; shape.numel()], false).expect("sized by construction")
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> Shape {
        self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Borrow the underlying buffer read-only.
    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.data.borrow().clone()
    }

    /// Extract the single element of a scalar tensor.
    pub fn value(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(),
            });
        }
        Ok(self.node.data.borrow()[0])
    }

    /// Replace the stored values (the shape is fixed). Used by the optimizer
    /// and by finite-difference probes; only meaningful on leaves.
    pub fn set_data(&self, values: &[S]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(TensorError::BadArgument {
                op: "set_data",
                msg: format!("expected {} values, got {}", self.numel(), values.len()),
            });
        }
        self.node.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Mutate the stored values in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.node.data.borrow_mut());
    }

    /// Copy of the accumulated gradient, if any backward pass has reached
    /// this leaf since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={})", self.node.id, self.node.shape)
    }
}

/// A named trainable tensor.
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, tensor: Tensor<S>) -> Self {
        Parameter {
            name: name.into(),
            tensor,
        }
    }
}
