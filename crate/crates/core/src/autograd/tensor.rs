//! Dense f32 tensor with optional reverse-mode gradient tracking.
//!
//! A `Tensor` is a cheap handle (`Rc`) onto shared storage. Operations
//! record a graph node on their output when gradients are enabled and at
//! least one input requires a gradient; `backward` walks the recorded
//! graph once in reverse topological order and clears it.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::ops::Op;

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Tensor>,
}

pub(crate) struct Inner {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
    pub node: Option<Node>,
}

/// Handle onto a dense row-major f32 array, optionally tracked for gradients.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<Inner>>,
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True when operations should record graph nodes on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` with gradient recording disabled (evaluation fast path).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

impl Tensor {
    pub(crate) fn raw(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad,
                grad: None,
                node: None,
            })),
        }
    }

    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::raw(data, shape.to_vec(), false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::raw(vec![0.0; numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::raw(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::raw(vec![value], vec![1], false)
    }

    /// Seeded Gaussian init with standard deviation `sigma`.
    pub fn randn<R: Rng>(shape: &[usize], sigma: f32, rng: &mut R) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (z * sigma as f64) as f32
            })
            .collect();
        Tensor::raw(data, shape.to_vec(), false)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self, context: &'static str) -> Result<(usize, usize)> {
        let inner = self.inner.borrow();
        if inner.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "{context}: expected 2-D tensor, got shape {:?}",
                inner.shape
            )));
        }
        Ok((inner.shape[0], inner.shape[1]))
    }

    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    /// Mutable access to raw values. Intended for leaf tensors (parameter
    /// updates, EMA shadows); mutating an op output invalidates its graph.
    pub fn data_mut(&self) -> RefMut<'_, [f32]> {
        RefMut::map(self.inner.borrow_mut(), |i| i.data.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    pub fn item(&self) -> Result<f32> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                inner.shape
            )));
        }
        Ok(inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn set_grad(&self, grad: Option<Vec<f32>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.numel(), "grad length must match data");
        }
        self.inner.borrow_mut().grad = grad;
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Detached deep copy: fresh storage, no graph, no grad.
    pub fn detached_copy(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::raw(inner.data.clone(), inner.shape.clone(), false)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    /// Stable identity of the underlying storage (pointer based).
    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn attach_node(&self, node: Node) {
        self.inner.borrow_mut().node = Some(node);
    }

    pub(crate) fn has_node(&self) -> bool {
        self.inner.borrow().node.is_some()
    }

    pub(crate) fn add_to_grad(&self, delta: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        debug_assert_eq!(delta.len(), n);
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    /// Reverse-mode pass from a scalar loss. Populates `grad` on every
    /// reachable tensor with `requires_grad`, then clears the graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.inner.borrow().shape
            )));
        }
        if !self.has_node() {
            // Constant loss: nothing depends on a tracked tensor.
            return Ok(());
        }

        // Post-order over tensors that carry graph nodes.
        let order = self.topo_order();
        self.add_to_grad(&[1.0]);

        for t in order.iter().rev() {
            let node = match t.inner.borrow_mut().node.take() {
                Some(n) => n,
                None => continue,
            };
            let grad = match t.inner.borrow_mut().grad.take() {
                Some(g) => g,
                None => continue, // branch never contributed to the loss
            };
            super::ops::backward_step(t, &node, &grad);
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        enum Visit {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut order = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack = vec![Visit::Enter(self.clone())];
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(t) => {
                    if !seen.insert(t.key()) {
                        continue;
                    }
                    stack.push(Visit::Exit(t.clone()));
                    let inner = t.inner.borrow();
                    if let Some(node) = &inner.node {
                        for inp in &node.inputs {
                            if inp.has_node() {
                                stack.push(Visit::Enter(inp.clone()));
                            }
                        }
                    }
                }
                Visit::Exit(t) => order.push(t),
            }
        }
        order
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("has_grad", &inner.grad.is_some())
            .finish()
    }
}
