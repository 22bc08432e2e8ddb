//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a node of the computation graph. Leaves
//! are created from raw buffers; every differentiable operation in [`ops`] and
//! [`conv`] records a node holding its inputs and a closure that maps the
//! output gradient to input gradients. Nodes are recorded only when at least
//! one input requires a gradient, so a forward pass through frozen parameters
//! builds no graph at all.
//!
//! Layout is N,C,H,W throughout. Gradients accumulate into leaf buffers until
//! [`Tensor::zero_grad`] is called.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod ops;

/// Floating point element type. `f32` is used for training, `f64` for
/// gradient verification.
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + Sum + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a·b (+ c when accumulate)` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
        accumulate: bool,
    );
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>], &[T]) -> Vec<Option<Vec<T>>>>;

struct GraphOp<T: Element> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    op: Option<GraphOp<T>>,
}

/// Shared handle to a tensor. Cloning the handle does not copy data.
pub struct Tensor<T: Element = f32>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad.get())
            .field("op", &self.0.op.as_ref().map(|o| o.name))
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    /// Creates a leaf tensor. Fails when the buffer length disagrees with the shape.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim("tensor", "buffer length", numel(shape), data.len()));
        }
        Ok(Self::leaf(shape.to_vec(), data))
    }

    fn leaf(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(false),
            op: None,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![T::zero(); numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(shape.to_vec(), vec![T::from_f64(value); numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Uniform in `[-bound, bound)`. Samples are drawn in f64 so that the same
    /// seed yields the same values (up to rounding) in either precision.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        Self::leaf(shape.to_vec(), data)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self::leaf(shape.to_vec(), data)
    }

    /// Records a graph node when gradients are enabled and any input needs one;
    /// otherwise returns a constant.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{name}");
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Self::leaf(shape, data);
        }
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(true),
            op: Some(GraphOp {
                name,
                inputs,
                backward,
            }),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the buffer. Used by optimizers and fixtures; mutating a
    /// tensor that is an input of a live graph invalidates that graph.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Marks a leaf as trainable or frozen. Freezing drops any accumulated grad.
    pub fn set_requires_grad(&self, flag: bool) {
        assert!(self.is_leaf(), "requires_grad can only be set on leaf tensors");
        self.0.requires_grad.set(flag);
        if !flag {
            self.0.grad.borrow_mut().take();
        }
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().take();
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name)
    }

    /// A leaf holding a copy of this tensor's data, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.to_vec())
    }

    /// Deep copy of a leaf, preserving its requires_grad flag.
    pub fn deep_clone(&self) -> Self {
        let t = self.detach();
        t.0.requires_grad.set(self.requires_grad());
        t
    }

    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Converts precision, producing a leaf with the same requires_grad flag.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.0.data.borrow().iter().map(|v| U::from_f64(v.as_f64())).collect();
        let t = Tensor::<U>::leaf(self.0.shape.clone(), data);
        t.0.requires_grad.set(self.requires_grad() && self.is_leaf());
        t
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }

    /// Back-propagates from a single-element loss, accumulating into the grad
    /// buffers of every trainable leaf reachable from it. Leaves that do not
    /// require grad are never given a buffer.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS; each node is visited once.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashMap<*const Node<T>, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if seen.insert(t.key(), ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for inp in op.inputs.iter().rev() {
                    if inp.requires_grad() && !seen.contains_key(&inp.key()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        grads.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.0.op {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let data = t.0.data.borrow();
                    let input_grads = (op.backward)(&g, &op.inputs, &data);
                    debug_assert_eq!(input_grads.len(), op.inputs.len(), "{}", op.name);
                    for (inp, ig) in op.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel(), "{} grad length", op.name);
                        match grads.get_mut(&inp.key()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                grads.insert(inp.key(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
        accumulate: bool,
    ) {
        gemm::check_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: check_bounds verified every strided access lies inside its slice.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            );
        }
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
        accumulate: bool,
    ) {
        gemm::check_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: check_bounds verified every strided access lies inside its slice.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            );
        }
    }
}
