//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every [`Var`] owns its forward value. Values produced from inputs that
//! require gradients keep a backward closure pointing at their parents; values
//! computed purely from constants keep nothing, so inference without any
//! gradient-requiring leaf records no tape at all.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Dims, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) trait GradFn<T: Scalar> {
    fn parents(&self) -> Vec<Var<T>>;
    /// Gradients for each parent, in `parents()` order.
    fn backward(&self, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Origin<T: Scalar> {
    Constant,
    Leaf,
    Op(Box<dyn GradFn<T>>),
    Consumed,
}

struct Node<T: Scalar> {
    id: u64,
    value: Arc<Tensor<T>>,
    origin: RefCell<Origin<T>>,
    grad: RefCell<Option<Tensor<T>>>,
}

/// A tensor value in the computation graph.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("dims", &self.0.value.dims())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn with_origin(value: Arc<Tensor<T>>, origin: Origin<T>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            origin: RefCell::new(origin),
            grad: RefCell::new(None),
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::with_origin(Arc::new(value), Origin::Constant)
    }

    /// A constant that shares storage with `value` (e.g. model parameters).
    pub fn shared_constant(value: Arc<Tensor<T>>) -> Self {
        Self::with_origin(value, Origin::Constant)
    }

    /// A leaf whose gradient is accumulated by [`backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::with_origin(Arc::new(value), Origin::Leaf)
    }

    /// A leaf that shares storage with `value`.
    pub fn shared_leaf(value: Arc<Tensor<T>>) -> Self {
        Self::with_origin(value, Origin::Leaf)
    }

    pub(crate) fn from_op(value: Tensor<T>, op: impl GradFn<T> + 'static) -> Self {
        let origin = if op.parents().iter().any(Var::requires_grad) {
            Origin::Op(Box::new(op))
        } else {
            Origin::Constant
        };
        Self::with_origin(Arc::new(value), origin)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn dims(&self) -> Dims {
        self.0.value.dims()
    }

    pub fn requires_grad(&self) -> bool {
        !matches!(*self.0.origin.borrow(), Origin::Constant)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(*self.0.origin.borrow(), Origin::Leaf)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Ref<'_, Tensor<T>>> {
        Ref::filter_map(self.0.grad.borrow(), Option::as_ref).ok()
    }

    pub fn take_grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow_mut().take()
    }

    fn accumulate(&self, g: Tensor<T>) -> Result<()> {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

/// Back-propagates from a single-element `root`, seeding its gradient with 1.
///
/// Leaf gradients accumulate across calls; the intermediate graph is released,
/// so a second call on the same graph fails with [`Error::GraphConsumed`].
pub fn backward<T: Scalar>(root: &Var<T>) -> Result<()> {
    if root.value().len() != 1 {
        return Err(Error::shape(
            "backward",
            format!("root must hold one element, has dims {:?}", root.dims()),
        ));
    }
    backward_with(root, Tensor::ones(root.dims()))
}

/// Back-propagates an explicit upstream gradient from `root`.
pub fn backward_with<T: Scalar>(root: &Var<T>, seed: Tensor<T>) -> Result<()> {
    if seed.dims() != root.dims() {
        return Err(Error::shape(
            "backward",
            format!("seed {:?} vs root {:?}", seed.dims(), root.dims()),
        ));
    }
    match *root.0.origin.borrow() {
        Origin::Constant => return Err(Error::NoTape),
        Origin::Consumed => return Err(Error::GraphConsumed),
        Origin::Leaf => return root.accumulate(seed),
        Origin::Op(_) => {}
    }

    // Post-order DFS over recorded ops; reversing it yields a valid schedule.
    let mut order: Vec<Var<T>> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !seen.insert(v.id()) {
            continue;
        }
        let parents = match &*v.0.origin.borrow() {
            Origin::Op(op) => op.parents(),
            Origin::Consumed => return Err(Error::GraphConsumed),
            _ => continue,
        };
        stack.push((v.clone(), true));
        for p in parents.into_iter().rev() {
            if !seen.contains(&p.id()) {
                stack.push((p, false));
            }
        }
    }

    let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
    grads.insert(root.id(), seed);
    for v in order.iter().rev() {
        let Some(gy) = grads.remove(&v.id()) else {
            continue;
        };
        let origin = std::mem::replace(&mut *v.0.origin.borrow_mut(), Origin::Consumed);
        let Origin::Op(op) = origin else {
            unreachable!("schedule only holds recorded ops");
        };
        let parents = op.parents();
        let pgrads = op.backward(&gy)?;
        for (p, g) in parents.iter().zip(pgrads) {
            let Some(g) = g else { continue };
            if !p.requires_grad() {
                continue;
            }
            if p.is_leaf() {
                p.accumulate(g)?;
            } else if let Some(acc) = grads.get_mut(&p.id()) {
                acc.add_assign(&g)?;
            } else {
                grads.insert(p.id(), g);
            }
        }
    }
    Ok(())
}
