//! Dense f32 tensors with a recorded computation graph for reverse-mode
//! differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations whose
//! inputs require gradients record a node holding their parents and a
//! backward closure; the graph is owned by the output tensor and dropped with
//! it. Leaves that require gradients accumulate into their own `grad` buffer
//! on [`Tensor::backward`].

mod conv;
pub mod init;
pub(crate) mod kernels;
mod ops;

pub use conv::{conv2d, separable_conv2d, ConvSpec};
pub use ops::*;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Backward closure: `(grad_out, out_data, parents) -> grad per parent`.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f32], &[f32], &[Tensor]) -> Vec<Option<Vec<f32>>> + Send + Sync>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f32>>>,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any computation graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self::raw(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f32) -> Self {
        Self::raw(vec![1], vec![value], false, None)
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Ok(Self::new(shape, data)?.requires_grad())
    }

    /// Returns a leaf with the same data that participates in gradient tracking.
    pub fn requires_grad(self) -> Self {
        if self.0.requires_grad && self.0.node.is_none() {
            return self;
        }
        Self::raw(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// Leaf copy with no graph and no gradient tracking.
    pub fn detach(&self) -> Self {
        Self::raw(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    fn raw(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, node: Option<Node>) -> Self {
        Tensor(Arc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Builds the output of an op, recording a graph node when any parent is tracked.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}");
        let track = grad_enabled() && parents.iter().any(|p| p.tracks_grad());
        let node = track.then(|| Node {
            op,
            parents,
            backward,
        });
        Self::raw(shape, data, track, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the op that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().unwrap().clone()
    }

    pub fn set_grad(&self, grad: Option<Vec<f32>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.numel());
        }
        *self.0.grad.lock().unwrap() = grad;
    }

    pub fn zero_grad(&self) {
        self.set_grad(None);
    }

    /// Identity of the underlying allocation.
    pub fn same_as(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Propagates d(self)/d(leaf) into every tracked leaf reachable from `self`.
    /// Gradients accumulate across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.tracks_grad() {
            return Ok(());
        }

        // Iterative post-order DFS; `order` ends with `self`.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.tracks_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<usize, Vec<f32>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    let mut slot = t.0.grad.lock().unwrap();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let parent_grads = (node.backward)(&g, &t.0.data, &node.parents);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.tracks_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{} grad size", node.op);
                        match grads.get_mut(&p.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.tracks_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}

impl Drop for Inner {
    // Unlink parent chains iteratively so deep graphs don't recurse on drop.
    fn drop(&mut self) {
        let Some(node) = self.node.take() else { return };
        let mut pending = node.parents;
        while let Some(t) = pending.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.0) {
                if let Some(n) = inner.node.take() {
                    pending.extend(n.parents);
                }
            }
        }
    }
}
