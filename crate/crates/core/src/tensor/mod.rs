//! A small reverse-mode differentiable N-d array.
//!
//! Every op produces a fresh immutable [`Tensor`]; when any input requires a
//! gradient the op also records a backward rule so that [`Tensor::backward`]
//! can propagate gradients to the leaves. Parameters are leaves whose data may
//! be rewritten in place by an optimizer between steps.

mod autograd;
pub mod checkpoint;
pub mod gradcheck;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;

use num_traits::Float;

pub use autograd::GradFn;
pub use ops::conv::Conv2dSpec;
pub use ops::linalg::{matmul_mults, reset_matmul_mults};
pub use ops::elementwise::{broadcast_shape, sigmoid};
pub use ops::reduce::PoolKind;
pub use ops::resample::{linear_taps, resize_plane};

use crate::error::{Error, Result};

/// Floating point element type. `f32` is used for training and inference,
/// `f64` for gradient checking.
pub trait Scalar: Float + Default + fmt::Debug + fmt::Display + Sum + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording backward rules.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<S>>,
    consumed: Cell<bool>,
}

/// Reference-counted handle to a node of the compute graph.
pub struct Tensor<S: Scalar = f32> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Self {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let head: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("head", &head)
            .finish()
    }
}

/// Per-group mean and biased variance over `axes` (no graph recorded).
pub fn moments<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> (Vec<S>, Vec<S>) {
    ops::norm::moments(&x.data(), x.shape(), axes)
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<S: Scalar> Tensor<S> {
    fn from_node(node: Node<S>) -> Self {
        Self { node: Rc::new(node) }
    }

    fn leaf(data: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Self::from_node(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn: None,
            consumed: Cell::new(false),
        })
    }

    /// Constant tensor (never receives a gradient).
    pub fn new(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.into_param())
    }

    /// Re-wraps the data of this tensor as a fresh trainable leaf.
    pub fn into_param(self) -> Self {
        let data = self.node.data.borrow().clone();
        Self::leaf(data, self.node.shape.clone(), true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![S::zero(); numel(shape)], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(value: S) -> Self {
        Self::leaf(vec![value], vec![], false)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| S::lit(v)).collect(), shape)
    }

    /// Builds the output of an op. The backward rule is kept only when
    /// gradients are enabled and some input requires one.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        inputs: Vec<Tensor<S>>,
        backward: impl Fn(&[S]) -> Vec<Option<Vec<S>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by an op with output shape {shape:?}"
        );
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn::new(inputs, backward));
        Self::from_node(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn,
            consumed: Cell::new(false),
        })
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        self.node.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy of the values, detached from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.node.shape.clone(), false)
    }

    /// In-place rewrite of a leaf's values (optimizer updates, checkpoint
    /// loading, finite-difference probes).
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        debug_assert!(self.is_leaf(), "update_data on a non-leaf tensor");
        f(&mut self.node.data.borrow_mut());
    }

    pub fn set_data(&self, values: &[S]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Shape(format!(
                "cannot assign {} values to tensor of shape {:?}",
                values.len(),
                self.shape()
            )));
        }
        self.update_data(|d| d.copy_from_slice(values));
        Ok(())
    }

    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn node(&self) -> &Node<S> {
        &self.node
    }

    /// Element-wise check that every value is finite.
    pub fn all_finite(&self) -> bool {
        self.node.data.borrow().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 3]).is_err());
        let t = Tensor::<f32>::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let a = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        let b = no_grad(|| a.mul(&a).unwrap());
        assert!(!b.requires_grad());
        let c = a.mul(&a).unwrap();
        assert!(c.requires_grad());
    }
}
