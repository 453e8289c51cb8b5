//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every operation that consumes a tensor requiring gradients records a
//! backward closure together with links to its parents. Calling
//! [`backward`] on a scalar result sweeps the recorded graph in reverse
//! creation order, which is a valid reverse topological order because a
//! node is always created after its parents.
//!
//! The graph is built per forward pass and released when the last handle to
//! the output is dropped. Leaf tensors (parameters) keep their accumulated
//! gradients until [`Tensor::zero_grad`] is called.

pub mod gradcheck;
mod ops;
mod scalar;

use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

pub use ops::{
    add, batch_norm, concat_channels, conv2d, dropout, l1_loss, leaky_relu, mul, relu, scale,
    slice_channels, sum, upsample2x, BatchNormStats, Mode, Padding, UpsampleMode,
};
pub use scalar::Scalar;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, detail: detail.into() }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// A reference-counted handle to a node in the operation graph.
///
/// Cloning is cheap and yields another handle to the same storage.
pub struct Tensor<T = f32> {
    node: Arc<Node<T>>,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Arc::clone(&self.node) }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.grad_fn.as_ref().map(|g| g.op))
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// A constant leaf.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch(
                "from_vec",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// A trainable leaf that accumulates gradients.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch(
                "parameter",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    /// Result of an operation. Records `backward` only when gradients are
    /// enabled and some parent needs them.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        if track {
            let grad_fn = GradFn { op, parents, backward: Box::new(backward) };
            Self::build(shape, data, true, Some(grad_fn))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.node.data.read().expect("tensor data lock poisoned")
    }

    /// Mutable access for optimizers. Values written here are not tracked.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<T>> {
        self.node.data.write().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on a tensor with {} elements", d.len());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.grad_lock().clone()
    }

    pub(crate) fn grad_lock(&self) -> MutexGuard<'_, Option<Vec<T>>> {
        self.node.grad.lock().expect("tensor grad lock poisoned")
    }

    pub fn zero_grad(&self) {
        *self.grad_lock() = None;
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.node.shape.clone(), self.to_vec(), false, None)
    }

    /// Same storage viewed with another shape of equal size (copying values).
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", self.node.shape),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    fn accumulate(&self, incoming: Vec<T>) {
        let mut slot = self.grad_lock();
        match slot.as_mut() {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(&incoming) {
                    *e = *e + *g;
                }
            }
            None => *slot = Some(incoming),
        }
    }
}

/// Back-propagates from a scalar `loss`, accumulating (`+=`) gradients into
/// every leaf that requires them.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<(), TensorError> {
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar(loss.shape().to_vec()));
    }
    if !loss.requires_grad() {
        return Ok(());
    }

    // Collect every interior node reachable from the loss.
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if !seen.insert(t.node.id) {
            continue;
        }
        if let Some(gf) = &t.node.grad_fn {
            for p in &gf.parents {
                if p.requires_grad() && !seen.contains(&p.node.id) {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
    }
    order.sort_unstable_by(|a, b| b.node.id.cmp(&a.node.id));

    loss.accumulate(vec![T::one()]);
    for t in &order {
        let Some(g) = t.grad_lock().take() else { continue };
        let gf = t.node.grad_fn.as_ref().expect("interior node");
        let grads = (gf.backward)(&g);
        debug_assert_eq!(grads.len(), gf.parents.len(), "{} backward arity", gf.op);
        for (p, pg) in gf.parents.iter().zip(grads) {
            if let Some(pg) = pg {
                if p.requires_grad() {
                    debug_assert_eq!(pg.len(), p.numel(), "{} gradient size", gf.op);
                    p.accumulate(pg);
                }
            }
        }
    }
    Ok(())
}
