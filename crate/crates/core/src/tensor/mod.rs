//! Dense N×C×H×W tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: everything is a 4-D `f32` tensor,
//! graphs are built eagerly on the thread that owns them, and backward is a
//! single reverse topological sweep. Reductions and convolutions accumulate
//! in `f64` before rounding back to `f32`, which keeps gradient checks tight
//! and results bitwise reproducible for a fixed seed.
//!
//! Tensors are immutable after creation; the only sanctioned mutation paths
//! are the SGD update and checkpoint loading, both of which go through
//! [`Parameter`].

mod init;
mod loss;
mod ops;
mod sgd;

pub use init::kaiming_uniform;
pub use loss::{
    binary_cross_entropy, smooth_l1, smooth_l1_sum, softmax_cross_entropy,
    softmax_cross_entropy_weighted, LOG_EPS,
};
pub use ops::{
    adaptive_avg_pool, add, concat_channels, conv2d, grl, mul, pool_edges, relu, scale, sigmoid,
    softmax_channels, sum_all, upsample_nearest,
};
pub use sgd::sgd_step;

use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Shape of a 4-D tensor: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Inner {
    id: u64,
    shape: Shape,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    grad_fn: Option<Box<dyn GradFn>>,
}

/// Backward rule of one operation. Reads the output gradient and
/// accumulates into the parents' gradients.
pub(crate) trait GradFn {
    fn backward(&self, out: &Tensor, parents: &[Tensor]);
}

/// A dense 4-D tensor handle. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn assert_finite(data: &[f32], what: &str) {
    // Every forward and backward product must stay finite; failing fast here
    // turns silent divergence into a named error.
    if !data.iter().all(|v| v.is_finite()) {
        panic!("non-finite values produced by {what}");
    }
}

impl Tensor {
    /// Leaf tensor that does not take gradients.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Tensor {
        Tensor::make(shape, data, false)
    }

    /// Leaf tensor that accumulates gradients (parameters, probe inputs).
    pub fn var(shape: Shape, data: Vec<f32>) -> Tensor {
        Tensor::make(shape, data, true)
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.count()])
    }

    pub fn full(shape: Shape, value: f32) -> Tensor {
        Tensor::from_vec(shape, vec![value; shape.count()])
    }

    fn make(shape: Shape, data: Vec<f32>, requires_grad: bool) -> Tensor {
        assert_eq!(
            data.len(),
            shape.count(),
            "data length {} does not match shape {shape}",
            data.len()
        );
        assert_finite(&data, "tensor construction");
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                grad_fn: None,
            }),
        }
    }

    /// Internal constructor for op outputs.
    pub(crate) fn from_op(
        shape: Shape,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        grad_fn: Box<dyn GradFn>,
        op_name: &str,
    ) -> Tensor {
        assert_eq!(data.len(), shape.count(), "bad op output length in {op_name}");
        assert_finite(&data, op_name);
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            // Dead branch for backward; drop the graph edges.
            return Tensor::make(shape, data, false);
        }
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                grad_fn: Some(grad_fn),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer. Reserved for the optimizer and
    /// checkpoint loading; everything else must treat tensors as frozen.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.inner.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        assert_eq!(delta.len(), self.shape().count());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
        assert_finite(slot.as_ref().unwrap(), "gradient accumulation");
    }

    /// Scalar read; panics unless the tensor is 1x1x1x1.
    pub fn item(&self) -> f32 {
        assert_eq!(self.shape().count(), 1, "item() on non-scalar {}", self.shape());
        self.data()[0]
    }

    /// A gradient barrier: same values, fresh leaf, no history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.shape(), self.data().clone())
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate into
    /// every reachable tensor that requires them.
    pub fn backward(&self) {
        assert_eq!(
            self.shape().count(),
            1,
            "backward() needs a scalar root, got {}",
            self.shape()
        );
        assert!(self.requires_grad(), "backward() on a non-differentiable root");
        self.accumulate_grad(&[1.0]);

        // Iterative postorder DFS over parents, deduplicated by id.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((node, next_child)) = stack.pop() {
            let parents = &node.inner.parents;
            if next_child < parents.len() {
                stack.push((node.clone(), next_child + 1));
                let p = parents[next_child].clone();
                if p.requires_grad() && seen.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(node);
            }
        }

        for node in order.iter().rev() {
            if node.inner.grad.borrow().is_none() {
                continue;
            }
            if let Some(f) = &node.inner.grad_fn {
                f.backward(node, &node.inner.parents);
            }
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={})", self.id(), self.shape())
    }
}

/// A named learnable tensor plus its SGD momentum buffer.
pub struct Parameter {
    name: String,
    tensor: Tensor,
    momentum: RefCell<Vec<f32>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Shape, data: Vec<f32>) -> Parameter {
        let tensor = Tensor::var(shape, data);
        let momentum = RefCell::new(vec![0.0; shape.count()]);
        Parameter {
            name: name.into(),
            tensor,
            momentum,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub(crate) fn momentum_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.momentum.borrow_mut()
    }

    /// Overwrite values (checkpoint load). Resets the momentum buffer.
    pub fn load_values(&self, values: &[f32]) {
        assert_eq!(values.len(), self.shape().count());
        self.tensor.data_mut().copy_from_slice(values);
        self.momentum.borrow_mut().fill(0.0);
        self.tensor.zero_grad();
    }
}

impl fmt::Debug for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Parameter({}, {})", self.name, self.shape())
    }
}
