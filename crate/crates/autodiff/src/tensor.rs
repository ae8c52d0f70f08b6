use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{ArrayD, ArrayView4, IxDyn};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::param::{Param, ParamId};

static NEXT_NODE_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph on the current thread.
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

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule of a recorded op.
///
/// Arguments are the upstream gradient, the input values, the output value and a per-input flag saying
/// whether that input needs a gradient. Returns one optional gradient per input, shaped like the input.
pub(crate) type BackwardFn<F> =
    Box<dyn Fn(&ArrayD<F>, &[&ArrayD<F>], &ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>> + Send + Sync>;

struct GradFn<F: Float> {
    inputs: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Node<F: Float> {
    id: usize,
    value: ArrayD<F>,
    requires_grad: bool,
    grad_fn: Option<GradFn<F>>,
    param: Option<ParamId>,
}

impl<F: Float> Drop for Node<F> {
    // Long chains would otherwise be freed recursively.
    fn drop(&mut self) {
        let Some(gf) = self.grad_fn.take() else {
            return;
        };
        let mut stack = gf.inputs;
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.node) {
                if let Some(gf) = node.grad_fn.take() {
                    stack.extend(gf.inputs);
                }
            }
        }
    }
}

/// An n-dimensional value that remembers how it was computed.
///
/// Cloning is cheap (reference counted). Values are always kept in standard (row-major) layout.
pub struct Tensor<F: Float> {
    node: Arc<Node<F>>,
}

impl<F: Float> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<F: Float> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub(crate) fn into_standard<F: Float>(value: ArrayD<F>) -> ArrayD<F> {
    if value.is_standard_layout() {
        value
    } else {
        value.as_standard_layout().into_owned()
    }
}

impl<F: Float> Tensor<F> {
    fn new_node(value: ArrayD<F>, requires_grad: bool, grad_fn: Option<GradFn<F>>, param: Option<ParamId>) -> Self {
        Tensor {
            node: Arc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                value: into_standard(value),
                requires_grad,
                grad_fn,
                param,
            }),
        }
    }

    /// A constant: never receives a gradient.
    pub fn constant(value: ArrayD<F>) -> Self {
        Self::new_node(value, false, None, None)
    }

    /// A leaf that collects a gradient when it takes part in a loss.
    pub fn var(value: ArrayD<F>) -> Self {
        Self::new_node(value, is_grad_enabled(), None, None)
    }

    pub(crate) fn param_leaf(value: ArrayD<F>, param: ParamId, trainable: bool) -> Self {
        Self::new_node(value, trainable && is_grad_enabled(), None, Some(param))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn scalar(v: F) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Records the result of an op. No graph is kept when no input needs a gradient.
    pub(crate) fn from_op(value: ArrayD<F>, inputs: Vec<Tensor<F>>, backward: BackwardFn<F>) -> Self {
        let requires_grad = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then_some(GradFn { inputs, backward });
        Self::new_node(value, requires_grad, grad_fn, None)
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn value(&self) -> &ArrayD<F> {
        &self.node.value
    }

    pub fn into_value(self) -> ArrayD<F> {
        self.node.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.node.value.ndim()
    }

    pub fn numel(&self) -> usize {
        self.node.value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn param_id(&self) -> Option<ParamId> {
        self.node.param
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.node.value.clone())
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::Shape(format!("expected a 4-d tensor, got {:?}", self.shape()))),
        }
    }

    pub fn view4(&self) -> Result<ArrayView4<'_, F>> {
        self.node
            .value
            .view()
            .into_dimensionality()
            .map_err(|e| Error::Shape(format!("expected a 4-d tensor: {e}")))
    }

    /// The single element of a one-element tensor.
    pub fn to_scalar(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!("expected one element, got shape {:?}", self.shape())));
        }
        Ok(*self.node.value.iter().next().expect("one element"))
    }

    /// Reverse-mode sweep from this scalar.
    pub fn backward(&self) -> Result<Gradients<F>> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return Ok(grads);
        }

        // Post-order DFS gives inputs before consumers.
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<F>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for inp in &gf.inputs {
                    if inp.requires_grad() && !visited.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }

        let mut pending: HashMap<usize, ArrayD<F>> = HashMap::new();
        pending.insert(self.id(), ArrayD::from_elem(self.value().raw_dim(), F::one()));
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                Some(gf) => {
                    let needs: Vec<bool> = gf.inputs.iter().map(|i| i.requires_grad()).collect();
                    let values: Vec<&ArrayD<F>> = gf.inputs.iter().map(|i| i.value()).collect();
                    let input_grads = (gf.backward)(&g, &values, t.value(), &needs);
                    debug_assert_eq!(input_grads.len(), gf.inputs.len());
                    for (inp, gi) in gf.inputs.iter().zip(input_grads) {
                        let Some(gi) = gi else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(gi.shape(), inp.shape(), "gradient shape mismatch");
                        accumulate(&mut pending, inp.id(), gi);
                    }
                }
                None => {
                    if let Some(pid) = t.node.param {
                        accumulate(&mut grads.by_param, pid.0, g.clone());
                    }
                    grads.by_node.insert(t.id(), g);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate<F: Float>(map: &mut HashMap<usize, ArrayD<F>>, key: usize, g: ArrayD<F>) {
    match map.get_mut(&key) {
        Some(acc) => *acc += &g,
        None => {
            map.insert(key, g);
        }
    }
}

/// Gradients of a scalar with respect to the leaves it was computed from.
pub struct Gradients<F: Float> {
    by_node: HashMap<usize, ArrayD<F>>,
    by_param: HashMap<usize, ArrayD<F>>,
}

impl<F: Float> Default for Gradients<F> {
    fn default() -> Self {
        Gradients {
            by_node: HashMap::new(),
            by_param: HashMap::new(),
        }
    }
}

impl<F: Float> Gradients<F> {
    /// Gradient of a leaf tensor, if it took part.
    pub fn get(&self, t: &Tensor<F>) -> Option<&ArrayD<F>> {
        self.by_node.get(&t.id())
    }

    /// Gradient accumulated over every use of a parameter.
    pub fn param(&self, p: &Param<F>) -> Option<&ArrayD<F>> {
        self.by_param.get(&p.id().0)
    }

    pub fn param_mut(&mut self, p: &Param<F>) -> Option<&mut ArrayD<F>> {
        self.by_param.get_mut(&p.id().0)
    }

    pub fn remove_param(&mut self, p: &Param<F>) -> Option<ArrayD<F>> {
        self.by_param.remove(&p.id().0)
    }

    pub fn num_params(&self) -> usize {
        self.by_param.len()
    }
}
