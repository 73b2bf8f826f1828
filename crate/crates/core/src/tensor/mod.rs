//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tensor`] is an immutable value plus (optionally) the operation that
//! produced it. Backward rules are written in terms of other tensor
//! operations, so running [`grad`] with `create_graph = true` records the
//! backward pass itself and the returned gradients can be differentiated
//! again. The gradient penalty of the adversarial critic relies on this.
//!
//! A handful of operators (deformable sampling, pooling, resampling, reflect
//! padding) implement their backward pass directly on arrays. They are
//! first-order only; asking for a second-order graph through them is an
//! error.
//!
//! Everything here is single-threaded: nodes are reference counted with
//! `Rc` and gradient recording is controlled by a thread-local flag.

mod conv;
mod deform;
mod elementwise;
mod pool;

pub use conv::ConvParams;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Returns whether new operations are currently recorded for differentiation.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.0));
    }
}

/// Runs `f` with gradient recording switched on or off.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
    let _guard = GradModeGuard(prev);
    f()
}

/// Runs `f` without recording any operations.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub(crate) trait Backward {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient.
    fn backward(&self, inputs: &[Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;

    /// Whether `backward` is itself expressed with differentiable operations.
    fn higher_order(&self) -> bool {
        true
    }
}

struct GradFn {
    inputs: Vec<Tensor>,
    op: Box<dyn Backward>,
}

struct Node {
    id: usize,
    value: ArrayD<f64>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// A dense `f64` array that may carry a differentiation history.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op.name()))
            .finish()
    }
}

impl Tensor {
    fn from_node(value: ArrayD<f64>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        Tensor(Rc::new(Node { id: next_id(), value, requires_grad, grad_fn }))
    }

    /// A constant tensor with no history.
    pub fn constant(value: ArrayD<f64>) -> Self {
        Self::from_node(value, false, None)
    }

    /// A leaf tensor; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(value: ArrayD<f64>, requires_grad: bool) -> Self {
        Self::from_node(value, requires_grad, None)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape does not match data length");
        Self::constant(value)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ndarray::arr0(v).into_dyn())
    }

    /// Records `value` as the result of `op` applied to `inputs`.
    pub(crate) fn from_op(value: ArrayD<f64>, inputs: Vec<Tensor>, op: impl Backward + 'static) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::from_node(value, true, Some(GradFn { inputs, op: Box::new(op) }))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.0.value
    }

    pub fn data(&self) -> &[f64] {
        self.0.value.as_slice().expect("tensor values are stored contiguously")
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn numel(&self) -> usize {
        self.0.value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        self.data()[0]
    }

    /// Same value, no history.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

/// Gradients produced by a backward pass, keyed by tensor identity.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Multiplies every stored gradient by `k`.
    pub fn scale(&mut self, k: f64) {
        for g in self.map.values_mut() {
            *g = Tensor::constant(g.value() * k);
        }
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    // Iterative post-order DFS; graphs can be deep enough to make recursion risky.
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(gf) = &t.0.grad_fn {
            for inp in gf.inputs.iter().rev() {
                if inp.requires_grad() && !visited.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
    }
    order
}

fn run_backward(root: &Tensor, keep: &dyn Fn(&Tensor) -> bool, create_graph: bool) -> Result<Gradients> {
    if root.numel() != 1 {
        return Err(Error::Shape(format!("backward needs a scalar root, got shape {:?}", root.shape())));
    }
    let mut out = Gradients::default();
    if !root.requires_grad() {
        return Ok(out);
    }
    let order = topo_order(root);
    with_grad_mode(create_graph, || {
        let mut pending: HashMap<usize, Tensor> = HashMap::new();
        pending.insert(root.id(), Tensor::full(root.shape(), 1.0));
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else { continue };
            if let Some(gf) = &node.0.grad_fn {
                if create_graph && !gf.op.higher_order() {
                    return Err(Error::Unsupported(format!(
                        "operator `{}` has no second-order backward",
                        gf.op.name()
                    )));
                }
                let grads = gf.op.backward(&gf.inputs, node, &g);
                debug_assert_eq!(grads.len(), gf.inputs.len());
                for (inp, gi) in gf.inputs.iter().zip(grads) {
                    let Some(gi) = gi else { continue };
                    if !inp.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(gi.shape(), inp.shape(), "gradient shape for `{}`", gf.op.name());
                    let acc = match pending.remove(&inp.id()) {
                        Some(prev) => prev.add(&gi),
                        None => gi,
                    };
                    pending.insert(inp.id(), acc);
                }
            }
            if keep(node) {
                out.map.insert(node.id(), g);
            }
        }
        Ok(out)
    })
}

/// Backpropagates from a scalar `root`, returning gradients for every leaf
/// that requires them. The gradients carry no history.
pub fn backward(root: &Tensor) -> Result<Gradients> {
    run_backward(root, &|t| t.is_leaf(), false)
}

/// Gradients of a scalar `root` with respect to `wrt`. With `create_graph`
/// the results are themselves differentiable.
pub fn grad(root: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    let ids: HashSet<usize> = wrt.iter().map(|t| t.id()).collect();
    let grads = run_backward(root, &|t| ids.contains(&t.id()), create_graph)?;
    Ok(wrt
        .iter()
        .map(|t| grads.get(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

#[cfg(test)]
mod tests;
