use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::Float;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_VAR_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

/// Identity of a trainable leaf. Gradients are keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(u64);

impl VarId {
    pub(crate) fn fresh() -> Self {
        VarId(NEXT_VAR_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Backward closure: `(needs_grad per parent, output data, output gradient)` to one optional
/// gradient buffer per parent.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[bool], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct GradFn<T: Float> {
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) enum NodeKind<T: Float> {
    Constant,
    Variable(VarId),
    Op(GradFn<T>),
}

pub(crate) struct Node<T: Float> {
    pub(crate) id: TensorId,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) kind: NodeKind<T>,
}

/// Immutable, contiguous, row-major tensor with an optional link into the autodiff graph.
///
/// Cloning is cheap (reference counted). Operations that involve at least one tracked input
/// record a backward closure unless gradient recording is disabled via [`no_grad`].
pub struct Tensor<T: Float> {
    pub(crate) node: Arc<Node<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape())?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

/// Runs `f` without recording any autodiff graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
        }
    }
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let _guard = Guard;
    f()
}

pub fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

fn fresh_id() -> TensorId {
    TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
}

impl<T: Float> Tensor<T> {
    fn from_node(shape: Vec<usize>, data: Arc<Vec<T>>, kind: NodeKind<T>) -> Self {
        Tensor {
            node: Arc::new(Node {
                id: fresh_id(),
                shape,
                data,
                kind,
            }),
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::from_node(shape.to_vec(), Arc::new(data), NodeKind::Constant))
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::lit(v)).collect(), shape)
    }

    pub(crate) fn from_shared(data: Arc<Vec<T>>, shape: Vec<usize>, var: Option<VarId>) -> Self {
        let kind = match var {
            Some(v) => NodeKind::Variable(v),
            None => NodeKind::Constant,
        };
        Self::from_node(shape, data, kind)
    }

    pub fn full(value: T, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_node(shape.to_vec(), Arc::new(vec![value; n]), NodeKind::Constant)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(T::zero(), shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(T::one(), shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::full(value, &[1])
    }

    /// Builds the result of a differentiable operation. The backward closure receives, for
    /// each parent, whether a gradient is needed, and returns the parent gradients (same
    /// length as the parent's data) or `None`.
    pub fn from_op<F>(shape: Vec<usize>, data: Vec<T>, parents: Vec<Tensor<T>>, backward: F) -> Self
    where
        F: Fn(&[bool], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let record = grad_enabled() && parents.iter().any(|p| p.is_tracked());
        let kind = if record {
            NodeKind::Op(GradFn {
                parents,
                backward: Box::new(backward),
            })
        } else {
            NodeKind::Constant
        };
        Self::from_node(shape, Arc::new(data), kind)
    }

    pub fn id(&self) -> TensorId {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.as_ref().clone()
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.node.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "item",
                msg: format!("tensor of shape {:?} is not a scalar", self.shape()),
            });
        }
        Ok(self.node.data[0])
    }

    /// Whether gradients can flow back from this tensor to some variable.
    pub fn is_tracked(&self) -> bool {
        !matches!(self.node.kind, NodeKind::Constant)
    }

    pub fn var_id(&self) -> Option<VarId> {
        match self.node.kind {
            NodeKind::Variable(v) => Some(v),
            _ => None,
        }
    }

    /// Same data, cut off from the graph.
    pub fn detach(&self) -> Self {
        if !self.is_tracked() {
            return self.clone();
        }
        Self::from_node(self.node.shape.clone(), self.shared_data(), NodeKind::Constant)
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::Rank {
                op: "dims4",
                expected: 4,
                got: self.shape().to_vec(),
            }),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Converts element type; the result is a constant.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::from_node(self.shape().to_vec(), Arc::new(data), NodeKind::Constant)
    }
}
