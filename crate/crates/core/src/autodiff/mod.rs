//! Tape-free reverse-mode automatic differentiation.
//!
//! Every [`Var`] holds its value and, when it was produced while gradient
//! recording was on, the parents and vector-Jacobian product that created
//! it. Backward rules are themselves written with `Var` operations, so a
//! gradient computed with `create_graph = true` can be differentiated again.
//! That is what the second-order meta-gradient relies on.

mod conv;
mod linalg;
mod ops;

pub use conv::{conv2d_forward, conv2d_input_grad, conv2d_weight_grad, im2col};
pub use linalg::lu_solve;
pub use ops::{concat, stack_rows};

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{Real, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` with gradient recording switched to `enabled`, restoring the
/// previous mode afterwards.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(enabled)));
    f()
}

pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

type BackwardFn<T> = Box<dyn Fn(&Var<T>, &[bool]) -> Vec<Option<Var<T>>>>;

struct Node<T: Real> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A differentiable tensor value.
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

impl<T: Real> Var<T> {
    /// A graph leaf. Gradients are only tracked through leaves created with
    /// `requires_grad = true`.
    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    pub(crate) fn from_op(
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&Var<T>, &[bool]) -> Vec<Option<Var<T>>> + 'static,
    ) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !record {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            parents: parents.iter().map(|&p| p.clone()).collect(),
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }
}

/// Gradients of the scalar `output` with respect to each of `inputs`.
///
/// With `create_graph` the returned gradients are themselves recorded and
/// can be differentiated again. Inputs the output does not depend on yield
/// `None`.
pub fn grad<T: Real>(output: &Var<T>, inputs: &[&Var<T>], create_graph: bool) -> Vec<Option<Var<T>>> {
    assert_eq!(
        output.value().numel(),
        1,
        "grad() needs a scalar output, got shape {:?}",
        output.shape()
    );
    if !output.requires_grad() {
        return vec![None; inputs.len()];
    }
    let wanted: HashMap<u64, usize> = inputs.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();
    let order = topo_order(output);

    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
    let mut result = vec![None; inputs.len()];

    with_grad_mode(create_graph, || {
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if let Some(&slot) = wanted.get(&node.id()) {
                result[slot] = Some(g.clone());
            }
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let needs: Vec<bool> = node.0.parents.iter().map(|p| p.requires_grad()).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape for parent");
                match grads.remove(&parent.id()) {
                    Some(acc) => {
                        grads.insert(parent.id(), acc.add(&pg));
                    }
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
    });
    result
}

/// Like [`grad`] but returns plain tensors, with zeros for inputs the
/// output does not depend on.
pub fn grad_tensors<T: Real>(output: &Var<T>, inputs: &[&Var<T>]) -> Vec<Tensor<T>> {
    grad(output, inputs, false)
        .into_iter()
        .zip(inputs)
        .map(|(g, v)| match g {
            Some(g) => g.value().clone(),
            None => Tensor::zeros(v.shape()),
        })
        .collect()
}

fn topo_order<T: Real>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // (node, next parent index to visit)
    let mut stack: Vec<(Var<T>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, i)) = stack.pop() {
        if i < node.0.parents.len() {
            let parent = node.0.parents[i].clone();
            stack.push((node, i + 1));
            if parent.requires_grad() && visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}
