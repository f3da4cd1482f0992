//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The op set is the minimal closure needed by the condition-unit
//! transformer: add/sub/mul, matmul, reshape/transpose, slice/concat,
//! mean/sum, layer norm, GELU, softmax, and embedding lookup. Every op
//! validates shapes at its boundary and fails fast with an error naming
//! both shapes.
//!
//! Graphs are built implicitly: an op whose inputs carry `requires_grad`
//! records its parents and a backward closure; `backward()` on a scalar
//! loss walks the graph in reverse topological order and accumulates
//! gradients additively into every `requires_grad` ancestor.
//!
//! Tensors are immutable after construction except for gradient
//! accumulation and explicit leaf updates (`data_mut`, used by the
//! optimizer and the finite-difference checker between graph lifetimes).

mod grad_check;
pub mod kernels;
mod ops;
mod scalar;

pub use grad_check::finite_diff_check;
pub use scalar::Scalar;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Given the gradient w.r.t. an op's output, fill per-parent gradient
/// slots (aligned with the node's parent list). Slots for parents that
/// do not require grad are left `None`.
type BackwardFn<T> = Box<dyn Fn(&[T], &mut [Option<Vec<T>>])>;

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward_fn: Option<BackwardFn<T>>,
}

/// Dense tensor handle. Cloning is shallow (shares the node).
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward_fn: Option<BackwardFn<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                parents,
                backward_fn,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::new_node(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// Leaf tensor that accumulates gradients (a parameter).
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn scalar(v: T) -> Self {
        Self::new_node(Vec::new(), vec![v], false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![T::zero(); numel], false, Vec::new(), None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![T::one(); numel], false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![v; numel], false, Vec::new(), None)
    }

    /// Leaf filled with `N(0, std^2)` draws in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: T, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::standard_normal(rng) * std)
            .collect();
        Self::new_node(shape.to_vec(), data, false, Vec::new(), None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward_fn: BackwardFn<T>,
    ) -> Self {
        let requires = parents.iter().any(|p| p.requires_grad());
        if requires {
            Self::new_node(shape, data, true, parents, Some(backward_fn))
        } else {
            // Nothing upstream tracks gradients: prune the graph edge.
            Self::new_node(shape, data, false, Vec::new(), None)
        }
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

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer. Only leaves may be mutated, and
    /// only between graph lifetimes (optimizer steps, finite-difference
    /// probes).
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, yes: bool) {
        self.inner.requires_grad.set(yes);
    }

    /// Current gradient, if any has been accumulated.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Borrowed view of the gradient slot (no copy).
    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.inner.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn accumulate_grad(&self, g: &[T]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Scales the accumulated gradient in place, if present.
    pub fn scale_grad(&self, factor: T) {
        if let Some(buf) = self.inner.grad.borrow_mut().as_mut() {
            for v in buf.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Detached leaf copy of this tensor's current values.
    pub fn detached(&self) -> Tensor<T> {
        Self::new_node(
            self.inner.shape.clone(),
            self.to_vec(),
            false,
            Vec::new(),
            None,
        )
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode backward pass from a scalar loss.
    ///
    /// Accumulates gradients additively into every reachable tensor with
    /// `requires_grad`; repeated calls without zeroing add up.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            // Constant loss: every gradient is zero; nothing to do.
            return Ok(());
        }

        let order = self.topo_order();
        let mut table: HashMap<u64, Vec<T>> = HashMap::new();
        table.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(g) = table.remove(&node.id()) else {
                continue;
            };
            node.accumulate_grad(&g);
            if let Some(back) = &node.inner.backward_fn {
                let mut slots: Vec<Option<Vec<T>>> = vec![None; node.inner.parents.len()];
                back(&g, &mut slots);
                for (parent, slot) in node.inner.parents.iter().zip(slots) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    let Some(pg) = slot else { continue };
                    debug_assert_eq!(pg.len(), parent.numel());
                    match table.get_mut(&parent.id()) {
                        Some(buf) => {
                            for (b, v) in buf.iter_mut().zip(pg) {
                                *b += v;
                            }
                        }
                        None => {
                            table.insert(parent.id(), pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the `requires_grad` subgraph: parents before
    /// children, iterative so deep graphs cannot overflow the stack.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
