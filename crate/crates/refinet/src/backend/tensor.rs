//! Dense 4-D tensors with reverse-mode gradient tracking.
//!
//! Every value in the system — images, feature maps, scalar losses — is a
//! `Tensor` shaped (batch, channels, height, width), stored row-major.
//! Applying an op records the inputs and a backward hook on the result, so a
//! scalar loss can later push adjoints back to every parameter it depends on.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Element type for tensor math. f32 is the working precision; f64 exists for
/// the gradient-check verification mode.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + fmt::Debug + fmt::Display + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for converting literal constants into the element type.
pub(crate) fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("constant representable in element type")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { batch, channels, height, width }
    }

    pub fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Row-major flat index.
    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.height + y) * self.width + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.batch, self.channels, self.height, self.width)
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("data length {len} does not fit shape {shape} ({expected} elements)")]
    DataLength { len: usize, shape: Shape, expected: usize },
    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: Shape },
    #[error("expected a scalar tensor, got shape {shape}")]
    NotScalar { shape: Shape },
    #[error("nearest-neighbor downsample by {factor} does not divide {height}x{width}")]
    NonDivisibleResize { factor: usize, height: usize, width: usize },
    #[error("resize factor must be >= 1")]
    ZeroFactor,
    #[error("parameter `{name}` has no gradient")]
    MissingGrad { name: String },
}

/// Backward hook: given the node's adjoint and a per-parent "wanted" mask,
/// return the adjoint contribution for each parent (None where not wanted).
pub(crate) type BackwardHook<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

pub(crate) struct OpRecord<T: Real> {
    pub parents: Vec<Tensor<T>>,
    pub backward: BackwardHook<T>,
}

struct Inner<T: Real> {
    id: u64,
    shape: Shape,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<OpRecord<T>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// A shared handle to a tensor node. Cloning is cheap and aliases the storage.
pub struct Tensor<T: Real = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("leaf", &self.inner.op.is_none())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    fn build(shape: Shape, data: Vec<T>, requires_grad: bool, op: Option<OpRecord<T>>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
                expected: shape.numel(),
            });
        }
        Ok(Self::build(shape, data, false, None))
    }

    /// Trainable leaf; `backward` deposits gradients here.
    pub fn parameter(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
                expected: shape.numel(),
            });
        }
        Ok(Self::build(shape, data, true, None))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::build(shape, vec![T::zero(); shape.numel()], false, None)
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self::build(shape, vec![value; shape.numel()], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Shape::scalar(), vec![value], false, None)
    }

    /// Records an op node. If no parent carries gradient history the result
    /// is a plain leaf, so pure data pipelines do not grow graphs.
    pub(crate) fn from_op(
        shape: Shape,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardHook<T>,
    ) -> Self {
        let connected = parents.iter().any(|p| p.grad_connected());
        let op = connected.then_some(OpRecord { parents, backward });
        Self::build(shape, data, false, op)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// Part of some recorded graph, directly or transitively.
    pub(crate) fn grad_connected(&self) -> bool {
        self.inner.requires_grad || self.inner.op.is_some()
    }

    pub(crate) fn op(&self) -> Option<&OpRecord<T>> {
        self.inner.op.as_ref()
    }

    pub(crate) fn data_ref(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> Result<T, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape() });
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrite the stored values in place (optimizer updates, checkpoint
    /// restore, test hooks). Shape is fixed for the lifetime of the tensor.
    pub fn set_data(&self, values: &[T]) -> Result<(), TensorError> {
        if values.len() != self.numel() {
            return Err(TensorError::DataLength {
                len: values.len(),
                shape: self.shape(),
                expected: self.numel(),
            });
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Apply `f` to the stored values in place.
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(self.inner.data.borrow_mut().as_mut_slice());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, adjoint: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ai) in g.iter_mut().zip(adjoint) {
                    *gi = *gi + *ai;
                }
            }
            None => *slot = Some(adjoint.to_vec()),
        }
    }

    /// A new leaf sharing this tensor's current values but cut off from the
    /// recorded graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::build(self.shape(), self.to_vec(), false, None)
    }

    /// True if every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}
