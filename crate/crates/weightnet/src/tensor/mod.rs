//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Layout is always row-major, tensors are NCHW. A [`Tape`] records one
//! operation node per produced tensor; [`NDTensor::backward`] replays the
//! nodes in reverse creation order, which is a valid reverse-topological
//! order because an operation can only consume already-created tensors.
//! Gradients accumulate additively across fan-out and the node list is
//! drained by the traversal, so each node runs exactly once and the tape is
//! freed afterwards.
//!
//! A tape and its tensors are confined to one thread (`Rc` makes this a
//! compile-time guarantee); independent tapes may live on different threads.
//! The numeric loops inside an operation may still fan out over rayon — they
//! only touch plain slices.

pub mod gradcheck;
pub mod kernels;
mod ops;

pub use ops::{batch_norm_train, concat};

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Element type of a tensor: 32-bit for training, 64-bit for oracle and
/// equivalence work. The per-mode tolerance constants live here so no test
/// invents its own.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum<Self>
{
    const ZERO: Self;
    const ONE: Self;
    /// Max absolute difference two algebraically-equal routes may show.
    const EQUIV_TOL: f64;
    /// Relative tolerance for finite-difference gradient checks.
    const GRAD_RTOL: f64;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const EQUIV_TOL: f64 = 1e-4;
    const GRAD_RTOL: f64 = 1e-2;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const EQUIV_TOL: f64 = 1e-12;
    const GRAD_RTOL: f64 = 1e-4;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

fn next_id() -> u64 {
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

/// Shared storage: id + shape + buffer. Buffers are immutable after creation
/// except for the optimizer's between-step updates.
pub(crate) struct Storage<T> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
}

impl<T: Scalar> Storage<T> {
    pub(crate) fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.data.borrow(), |v| v.as_slice())
    }
}

/// A dense tensor handle. Cloning is cheap; clones share storage.
pub struct NDTensor<T: Scalar> {
    pub(crate) inner: Rc<Storage<T>>,
    tape: Option<Tape<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Clone for NDTensor<T> {
    fn clone(&self) -> Self {
        NDTensor {
            inner: Rc::clone(&self.inner),
            tape: self.tape.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl<T: Scalar> fmt::Debug for NDTensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NDTensor(id={}, shape={:?})", self.inner.id, self.inner.shape)
    }
}

fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::BadGeometry {
            op: "from_vec",
            msg: "all extents must be >= 1".into(),
            shape: shape.to_vec(),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::BadGeometry {
            op: "from_vec",
            msg: format!("shape product {numel} != data length {len}"),
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> NDTensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape, data.len())?;
        Ok(NDTensor {
            inner: Rc::new(Storage {
                id: next_id(),
                shape,
                data: RefCell::new(data),
            }),
            tape: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_vec(shape, vec![T::ZERO; n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![1], vec![value]).expect("scalar shape is valid")
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        self.inner.data()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() requires a scalar tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Whether this handle participates in tape recording.
    pub fn is_tracked(&self) -> bool {
        self.tape.is_some()
    }

    /// An alias of this tensor registered on `tape` as a differentiable leaf.
    pub fn watch(&self, tape: &Tape<T>) -> Self {
        NDTensor {
            inner: Rc::clone(&self.inner),
            tape: Some(tape.clone()),
            requires_grad: true,
        }
    }

    /// An alias detached from any tape.
    pub fn detached(&self) -> Self {
        NDTensor {
            inner: Rc::clone(&self.inner),
            tape: None,
            requires_grad: false,
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// In-place buffer update; the optimizer's between-step hook.
    /// Must not run while a forward/backward pass is borrowing the data.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(self.inner.data.borrow_mut().as_mut_slice());
    }

    /// Reverse-mode sweep from a scalar loss. Consumes the tape's node list.
    pub fn backward(&self) -> Result<GradMap<T>> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let tape = self.tape.as_ref().ok_or_else(|| {
            Error::Usage("backward requires a loss attached to a tape".into())
        })?;
        let nodes = tape.take_nodes();
        let mut grads = Grads {
            bufs: HashMap::new(),
        };
        grads.buf(self.id(), 1)[0] = T::ONE;
        for node in nodes.into_iter().rev() {
            // A node whose output never received a gradient lies off the
            // path from the loss; skip it.
            if let Some(gout) = grads.bufs.remove(&node.out) {
                (node.backward)(&gout, &mut grads);
            }
        }
        Ok(GradMap { bufs: grads.bufs })
    }

    /// Output constructor used by every differentiable op: inherits the tape
    /// of the tracked inputs (which must agree) and records `backward` on it.
    pub(crate) fn op_output(
        op: &'static str,
        inputs: &[&NDTensor<T>],
        shape: Vec<usize>,
        data: Vec<T>,
        backward: impl FnOnce() -> Box<dyn Fn(&[T], &mut Grads<T>)>,
    ) -> Result<NDTensor<T>> {
        let mut tape: Option<&Tape<T>> = None;
        for t in inputs {
            if let Some(tp) = &t.tape {
                match tape {
                    None => tape = Some(tp),
                    Some(existing) if existing.same(tp) => {}
                    Some(_) => {
                        return Err(Error::Usage(format!(
                            "{op}: inputs belong to different tapes"
                        )))
                    }
                }
            }
        }
        let out = NDTensor {
            inner: Rc::new(Storage {
                id: next_id(),
                shape,
                data: RefCell::new(data),
            }),
            tape: tape.cloned(),
            requires_grad: false,
        };
        if let Some(tp) = &out.tape {
            tp.push(Node {
                op,
                out: out.id(),
                backward: backward(),
            });
        }
        Ok(out)
    }
}

struct Node<T: Scalar> {
    #[allow(dead_code)]
    op: &'static str,
    out: u64,
    backward: Box<dyn Fn(&[T], &mut Grads<T>)>,
}

/// Gradient accumulator passed to backward closures.
pub struct Grads<T: Scalar> {
    bufs: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    /// Mutable gradient buffer for tensor `id`, zero-initialized on first use.
    pub(crate) fn buf(&mut self, id: u64, len: usize) -> &mut [T] {
        self.bufs.entry(id).or_insert_with(|| vec![T::ZERO; len])
    }
}

/// Gradients surviving a backward sweep, keyed by tensor id. Leaves keep
/// their gradients; interior buffers are dropped as soon as their node runs.
pub struct GradMap<T: Scalar> {
    bufs: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, t: &NDTensor<T>) -> Option<NDTensor<T>> {
        self.bufs
            .get(&t.id())
            .map(|g| NDTensor::from_vec(t.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `t`, zeros if `t` is disconnected from the loss.
    pub fn grad_or_zeros(&self, t: &NDTensor<T>) -> NDTensor<T> {
        self.get(t)
            .unwrap_or_else(|| NDTensor::zeros(t.shape().to_vec()).expect("zeros"))
    }

    pub fn contains(&self, t: &NDTensor<T>) -> bool {
        self.bufs.contains_key(&t.id())
    }
}

/// Records the operations of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Register a differentiable leaf.
    pub fn var(&self, t: &NDTensor<T>) -> NDTensor<T> {
        t.watch(self)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node<T>) {
        self.nodes.borrow_mut().push(node);
    }

    fn take_nodes(&self) -> Vec<Node<T>> {
        std::mem::take(&mut *self.nodes.borrow_mut())
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}
