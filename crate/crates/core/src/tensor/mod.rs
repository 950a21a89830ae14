//! Minimal dense-tensor algebra with reverse-mode gradients.
//!
//! Tensors are row-major buffers wrapped in `Rc`; each op records its parents
//! and a backward closure, so calling [`Tensor::backward`] on a scalar loss
//! propagates gradients through the whole graph. The op set is exactly what
//! the planner model needs — this is not a general autodiff system.
//!
//! Shape violations are programming errors and panic with both shapes in the
//! message. Graphs are confined to one thread (`Rc`-based); immutable weight
//! snapshots cross threads as plain buffers (see [`checkpoint`]).

pub mod checkpoint;
pub mod ops;
pub mod optim;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

/// Scalar type for tensor buffers: f32 for training, f64 for gradient checks.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + std::iter::Sum + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

type BackwardFn<T> = Box<dyn Fn(&[T])>;

struct Inner<T: Real> {
    shape: Vec<usize>,
    values: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    name: Option<String>,
}

/// Reference-counted tensor handle; clones share the same node.
pub struct Tensor<T: Real> {
    inner: Rc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{:?}(grad={}, name={:?})",
            self.shape(),
            self.requires_grad(),
            self.inner.name
        )
    }
}

impl<T: Real> Tensor<T> {
    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], values: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            values.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
                name: None,
            }),
        }
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], values: Vec<T>, name: &str) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {:?} does not match buffer length {} for param {}",
            shape,
            values.len(),
            name
        );
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: true,
                parents: Vec::new(),
                backward: None,
                name: Some(name.to_string()),
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(&[1], vec![v])
    }

    pub(crate) fn new_node(
        shape: Vec<usize>,
        values: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "op produced shape {:?} with buffer length {}",
            shape,
            values.len()
        );
        if requires_grad {
            Tensor {
                inner: Rc::new(Inner {
                    shape,
                    values: RefCell::new(values),
                    grad: RefCell::new(None),
                    requires_grad: true,
                    parents,
                    backward: Some(backward),
                    name: None,
                }),
            }
        } else {
            // Inference path: drop graph bookkeeping so long generation loops
            // do not retain their history.
            Tensor::from_vec(&shape, values)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn name(&self) -> Option<&str> {
        self.inner.name.as_deref()
    }

    pub fn values(&self) -> Ref<'_, Vec<T>> {
        self.inner.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.values.borrow().clone()
    }

    /// Scalar extraction; panics unless the tensor has exactly one element.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.values.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the buffer in place (optimizer updates on leaf parameters).
    pub fn set_values(&self, values: Vec<T>) {
        assert_eq!(values.len(), self.len(), "set_values length mismatch");
        *self.inner.values.borrow_mut() = values;
    }

    pub fn with_values_mut<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> R {
        f(&mut self.inner.values.borrow_mut())
    }

    /// New constant tensor sharing this tensor's current values.
    pub fn detached(&self) -> Tensor<T> {
        Tensor::from_vec(self.shape(), self.to_vec())
    }

    pub(crate) fn accum_grad(&self, contribution: impl FnOnce(&mut [T])) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.len()]);
        contribution(buf);
    }

    /// Reverse-mode gradient propagation from a scalar output.
    ///
    /// Topological order comes from a post-order DFS over parent edges, so the
    /// traversal is deterministic for a given graph no matter where the nodes
    /// happen to live in memory.
    pub fn backward(&self) {
        assert_eq!(
            self.len(),
            1,
            "backward() requires a scalar, got shape {:?}",
            self.shape()
        );
        if !self.requires_grad() {
            return;
        }
        self.accum_grad(|g| g[0] = T::one());

        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<*const Inner<T>> = HashSet::new();
        // Iterative post-order DFS: entries are (node, parents_scheduled).
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&node.inner);
            if expanded {
                topo.push(node);
                continue;
            }
            if visited.contains(&key) {
                continue;
            }
            visited.insert(key);
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.inner)) {
                    stack.push((p.clone(), false));
                }
            }
        }

        for node in topo.iter().rev() {
            if let Some(f) = &node.inner.backward {
                let g = node.inner.grad.borrow().clone();
                if let Some(g) = g {
                    f(&g);
                }
            }
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
