//! Dense tensors with reverse-mode automatic differentiation over a
//! recorded operation tape.
//!
//! Tensors are cheap handles (`Rc`) to a shape plus a contiguous row-major
//! buffer. Images use the canonical rank-4 layout (batch, channel, height,
//! width); parameters and scalars use rank 1/2. Forward ops are recorded on
//! a [`Tape`]; [`Tape::backward`] walks the tape in reverse and accumulates
//! gradients into every `requires_grad` tensor reachable from the loss.
//!
//! Data buffers are immutable while a tape referencing them is alive; the
//! optimizer and checkpoint loader mutate parameter buffers between steps
//! via [`Tensor::set_data`].

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{BnStats, Tape};

/// Floating-point width of a tensor graph. All tensors in one graph share
/// one precision: training runs single, verification runs double.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Forward-pass mode; selects batch vs running statistics in batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Scalar element of a tensor. Implemented for `f32` (training) and `f64`
/// (finite-difference verification).
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const PRECISION: Precision;
    const DTYPE: &'static str;
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le_bytes(self, out: &mut Vec<u8>);
    fn read_le_bytes(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Single;
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes per f32"))
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Double;
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes per f64"))
    }
}

/// Tensor extents, outermost first. Displayed as `2x3x4x4`.
#[derive(Clone, PartialEq, Eq)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(dims.into())
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// The (batch, channel, height, width) extents of a rank-4 shape.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("expected a rank-4 tensor, got {self}"))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "scalar");
        }
        let joined: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", joined.join("x"))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl From<Vec<usize>> for Shape {
    fn from(dims: Vec<usize>) -> Self {
        Shape(dims)
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(dims: [usize; N]) -> Self {
        Shape(dims.to_vec())
    }
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<E: Element> {
    id: u64,
    shape: Shape,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    trainable: Cell<bool>,
}

/// Handle to a dense tensor. Cloning shares the underlying buffers.
pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={}, dtype={}, requires_grad={})",
            self.inner.id,
            self.inner.shape,
            E::DTYPE,
            self.inner.requires_grad
        )
    }
}

impl<E: Element> Tensor<E> {
    fn construct(shape: Shape, data: Vec<E>, requires_grad: bool) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::Shape(format!(
                "shape {} implies {} elements but the buffer holds {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                trainable: Cell::new(requires_grad),
            }),
        })
    }

    /// A constant tensor (no gradient tracking).
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<E>) -> Result<Self> {
        Self::construct(shape.into(), data, false)
    }

    /// A trainable parameter: `requires_grad` and `trainable` start true.
    pub fn param(shape: impl Into<Shape>, data: Vec<E>) -> Result<Self> {
        Self::construct(shape.into(), data, true)
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        let n = shape.numel();
        Self::construct(shape, vec![E::zero(); n], false).expect("sizes agree")
    }

    pub fn full(shape: impl Into<Shape>, value: E) -> Self {
        let shape = shape.into();
        let n = shape.numel();
        Self::construct(shape, vec![value; n], false).expect("sizes agree")
    }

    pub fn scalar(value: E) -> Self {
        Self::construct(Shape::scalar(), vec![value], false).expect("sizes agree")
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &Shape {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Whether the optimizer may update this parameter. Frozen layer groups
    /// clear this flag; gradients may still be computed.
    pub fn trainable(&self) -> bool {
        self.inner.trainable.get()
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.inner.trainable.set(trainable);
    }

    pub fn data(&self) -> Ref<'_, [E]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// The value of a one-element tensor.
    ///
    /// Panics when the tensor is not a scalar; that is a programming error,
    /// not a data error.
    pub fn item(&self) -> E {
        let data = self.inner.data.borrow();
        assert!(data.len() == 1, "item() on non-scalar tensor of shape {}", self.inner.shape);
        data[0]
    }

    /// Replace the buffer contents. Only valid between forward passes
    /// (optimizer updates, checkpoint loading, finite-difference probes).
    pub fn set_data(&self, new: &[E]) -> Result<()> {
        if new.len() != self.numel() {
            return Err(Error::Shape(format!(
                "set_data: buffer of {} elements does not fit shape {}",
                new.len(),
                self.inner.shape
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    pub(crate) fn data_mut(&self) -> std::cell::RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    /// Clone of the accumulated gradient, if any backward pass has run.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add into the gradient buffer, creating it on first use. `backward`
    /// calls this; it is public so optimizers can be driven by hand.
    pub fn accumulate_grad(&self, add: &[E]) {
        debug_assert_eq!(add.len(), self.numel());
        let mut grad = self.inner.grad.borrow_mut();
        match grad.as_mut() {
            Some(buf) => {
                for (g, a) in buf.iter_mut().zip(add) {
                    *g += *a;
                }
            }
            None => *grad = Some(add.to_vec()),
        }
    }
}

/// Debug-build check that an op produced finite values from finite inputs.
/// Non-finite inputs (e.g. diverged weights in a learning-rate sweep) are
/// allowed to propagate.
#[allow(unused_variables)]
pub(crate) fn debug_check_finite<E: Element>(op: &str, out: &[E], inputs: &[&[E]]) {
    #[cfg(debug_assertions)]
    {
        if out.iter().any(|v| !v.is_finite())
            && inputs.iter().all(|s| s.iter().all(|v| v.is_finite()))
        {
            panic!("{op}: non-finite output computed from finite inputs");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_display_and_numel() {
        let s = Shape::new([2, 3, 4, 4]);
        assert_eq!(s.to_string(), "2x3x4x4");
        assert_eq!(s.numel(), 96);
        assert_eq!(s.dims4().unwrap(), (2, 3, 4, 4));
        assert!(Shape::new([2, 3]).dims4().is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec([2, 2], vec![1.0; 4]).is_ok());
        let err = Tensor::<f64>::from_vec([2, 2], vec![1.0; 3]).unwrap_err();
        assert!(err.to_string().contains("2x2"));
    }

    #[test]
    fn zero_extent_is_allowed() {
        let t = Tensor::<f32>::from_vec([1, 0, 4, 4], vec![]).unwrap();
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn grad_accumulates() {
        let t = Tensor::<f64>::param([2], vec![1.0, 2.0]).unwrap();
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.25]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 1.25]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn set_data_rejects_wrong_length() {
        let t = Tensor::<f32>::zeros([2, 2]);
        assert!(t.set_data(&[1.0; 4]).is_ok());
        assert!(t.set_data(&[1.0; 5]).is_err());
    }
}
