//! Shaped numeric arrays with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a flat row-major buffer plus a shape. Math runs in f32 by
//! default; every kernel is generic over [`Dtype`] so the finite-difference
//! suites can run the identical code at f64. Gradients are recorded on a
//! [`Tape`]: each primitive pushes one adjoint record during the forward pass,
//! and `Tape::backward` replays the records in reverse, accumulating into the
//! `grad` buffer of every tensor that requires gradients.

mod ops;
mod tape;

pub use ops::IGNORE_INDEX;
pub use tape::Tape;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DtypeKind {
    F32,
    F64,
}

impl DtypeKind {
    pub fn tag(self) -> u8 {
        match self {
            DtypeKind::F32 => 0,
            DtypeKind::F64 => 1,
        }
    }
}

/// Scalar element type for tensors. Implemented for f32 and f64.
pub trait Dtype:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const KIND: DtypeKind;

    /// Convert a compile-time constant. Shorthand kept terse because it is
    /// everywhere in kernel code.
    fn c(v: f64) -> Self;
    fn f64(self) -> f64;

    fn zero() -> Self {
        Self::c(0.0)
    }
    fn one() -> Self {
        Self::c(1.0)
    }
    fn neg_inf() -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn erf(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Dtype for f32 {
    const KIND: DtypeKind = DtypeKind::F32;

    fn c(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn neg_inf() -> Self {
        f32::NEG_INFINITY
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn maximum(self, o: Self) -> Self {
        self.max(o)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Dtype for f64 {
    const KIND: DtypeKind = DtypeKind::F64;

    fn c(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    fn neg_inf() -> Self {
        f64::NEG_INFINITY
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn maximum(self, o: Self) -> Self {
        self.max(o)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<T: Dtype> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
}

/// Cheaply cloneable handle to a shaped buffer. Cloning shares storage;
/// `detach` produces an independent copy without gradient tracking.
pub struct Tensor<T: Dtype> {
    inner: Rc<Inner<T>>,
}

impl<T: Dtype> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Dtype> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Dtype> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} implies {} elements but data has {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
            }),
        })
    }

    /// Constant tensor, not tracked by any tape.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        Self::build(shape, data, false)
    }

    /// Leaf parameter: participates in backward and accumulates `grad`.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        Self::build(shape, data, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::build(shape, vec![T::zero(); n], false).expect("consistent")
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![], vec![v], false).expect("consistent")
    }

    pub(crate) fn result(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Self::build(shape, data, requires_grad).expect("op produced inconsistent shape")
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Rows/cols of a rank-2 tensor, with the op name in the error.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.inner.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(
                op,
                format!("expected a rank-2 tensor, got shape {:?}", other),
            )),
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.rank());
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            assert!(i < self.inner.shape[d]);
            flat = flat * self.inner.shape[d] + i;
        }
        self.inner.data.borrow()[flat]
    }

    /// Overwrite the buffer in place. Used by the optimizer and by
    /// finite-difference probes; shape must match.
    pub fn set_data(&self, new: &[T]) -> Result<()> {
        if new.len() != self.len() {
            return Err(Error::shape(
                "set_data",
                format!("expected {} elements, got {}", self.len(), new.len()),
            ));
        }
        self.inner.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    pub fn nudge(&self, flat_index: usize, delta: T) {
        let mut d = self.inner.data.borrow_mut();
        let v = d[flat_index];
        d[flat_index] = v + delta;
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Replace the gradient buffer (gradient clipping, tests).
    pub fn set_grad(&self, g: &[T]) {
        assert_eq!(g.len(), self.len());
        *self.inner.grad.borrow_mut() = Some(g.to_vec());
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn grad_snapshot(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Accumulate `delta` into the gradient buffer, allocating zeros first if
    /// absent. Accumulation order is fixed by tape replay order.
    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.len());
        let mut g = self.inner.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![T::zero(); self.len()]);
        for (gi, &di) in buf.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub(crate) fn seed_grad_ones(&self) {
        let mut g = self.inner.grad.borrow_mut();
        *g = Some(vec![T::one(); self.len()]);
    }

    /// Copy of this tensor detached from gradient tracking.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::result(self.inner.shape.clone(), self.to_vec(), false)
    }

    /// Bitwise equality of shape and data.
    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data().iter())
                .all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
    }
}
