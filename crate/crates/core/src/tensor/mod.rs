//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every operation on a tensor that requires gradients records its inputs,
//! so the result carries the full computation graph back to the leaves.
//! [`Tensor::backward`] walks that graph in reverse topological order and
//! accumulates `d root / d leaf` into each trainable leaf.
//!
//! Tensors are immutable once built; only the gradient buffer of a leaf
//! changes. A tensor without a computation record is `Send + Sync` and may be
//! shared read-only between threads.

mod gemm;
mod ops;
mod param;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use ops::LAYER_NORM_EPS;
pub use param::Parameter;

use ops::Op;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("log of non-positive value {0}")]
    NonPositiveLog(f64),
    #[error("row {row} has no valid positions")]
    NoValidPositions { row: usize },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
    requires_grad: bool,
}

/// Reference-counted handle to an immutable n-dimensional array.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(Op::name))
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::Invalid {
            op: "tensor",
            msg: format!("shape {shape:?} must have positive extents"),
        });
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(TensorError::Invalid {
            op: "tensor",
            msg: format!("shape {shape:?} holds {n} values, got {len}"),
        });
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, op: Option<Op>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: Mutex::new(None),
            op,
            requires_grad,
        }))
    }

    /// Result of an operation; the record is kept only when some input is differentiable.
    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        if op.inputs().iter().any(|t| t.requires_grad()) {
            Self::build(shape, data, Some(op), true)
        } else {
            Self::build(shape, data, None, false)
        }
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, None, false))
    }

    /// A trainable leaf.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, None, true))
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Self::build(vec![n], data, None, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![1], vec![value], None, false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![0.0; n], None, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Same values, no computation record, no gradient.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), None, false)
    }

    /// Last extent and the number of rows it spans.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let c = *self.0.shape.last().expect("non-empty shape");
        (self.numel() / c, c)
    }

    #[cfg(test)]
    pub(crate) fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn id(&self) -> u64 {
        self.0.id
    }

    /// Reverse topological order is produced by reversing this post-order.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for input in op.inputs() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Accumulates `d self / d leaf` into every trainable leaf reachable from `self`.
    ///
    /// Intermediate gradients live only for the duration of the call, so
    /// running backward twice on one graph adds exactly the same amount twice.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads = GradMap::default();
        grads.0.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.0.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                Some(op) => op.backward(node, &g, &mut grads),
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-pass gradient buffers keyed by node identity.
#[derive(Default)]
pub(crate) struct GradMap(HashMap<u64, Vec<f64>>);

impl GradMap {
    /// Runs `f` on the gradient buffer of `t`, creating it zeroed on first use.
    pub(crate) fn with(&mut self, t: &Tensor, f: impl FnOnce(&mut [f64])) {
        if !t.requires_grad() {
            return;
        }
        let buf = self.0.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()]);
        f(buf);
    }
}
