//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so the backward pass simply replays the tape in reverse.
//! Nodes only keep a backward closure when at least one input requires a
//! gradient; the closures are released after [`Graph::backward`] runs.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Computes gradients for each parent from the output gradient. The mask marks
/// which parents need one; entries for the others may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, usize>>,
    check_finite: bool,
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T: Element> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// A graph that never panics on overflow. Debug builds otherwise panic when
    /// an operation turns finite inputs into non-finite output; callers that
    /// detect divergence themselves (the trainer) opt out.
    pub fn without_finite_checks() -> Self {
        Graph {
            check_finite: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_node(Rc::new(value), requires_grad, Vec::new(), None)
    }

    /// Registers a trainable parameter under `key`. Repeated registrations of the
    /// same key within one graph return the same variable, so gradients from
    /// every use accumulate in one place.
    pub fn param(&self, key: usize, value: &Rc<Tensor<T>>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { graph: self, id };
        }
        let var = self.push_node(Rc::clone(value), true, Vec::new(), None);
        self.params.borrow_mut().insert(key, var.id);
        var
    }

    pub(crate) fn push_op(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if self.check_finite
            && !value.all_finite()
            && parents.iter().all(|p| p.value().all_finite())
        {
            panic!("operation produced non-finite values from finite inputs: {value:?}");
        }
        let backward = requires_grad.then_some(backward);
        self.push_node(
            Rc::new(value),
            requires_grad,
            parents.iter().map(|p| p.id).collect(),
            backward,
        )
    }

    fn push_node(
        &self,
        value: Rc<Tensor<T>>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Back-propagates from a single-element `loss` and returns every gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::dim(
                "numel",
                format!(
                    "backward needs a scalar, got shape {:?}",
                    nodes[loss.id].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let shape = nodes[loss.id].value.shape().to_vec();
        grads[loss.id] = Some(Tensor::ones(shape));

        for id in (0..=loss.id).rev() {
            let Some(backward) = nodes[id].backward.take() else {
                continue;
            };
            let Some(out_grad) = grads[id].as_ref() else {
                continue;
            };
            let parents = nodes[id].parents.clone();
            let mask: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(out_grad, &mask);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for ((&p, g), needed) in parents.iter().zip(parent_grads).zip(&mask) {
                let (Some(g), true) = (g, *needed) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.accumulate(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, usize>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of the parameter registered under `key`, if it was used.
    pub fn param(&self, key: usize) -> Option<&Tensor<T>> {
        self.params
            .get(&key)
            .and_then(|&id| self.grads[id].as_ref())
    }

    pub fn take_param(&mut self, key: usize) -> Option<Tensor<T>> {
        let id = *self.params.get(&key)?;
        self.grads[id].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_parameter_accumulates() {
        let g = Graph::<f64>::new();
        let w = Rc::new(Tensor::new([2], vec![1.5, -2.0]).unwrap());
        let a = g.param(7, &w);
        let b = g.param(7, &w);
        assert_eq!(a.id(), b.id());
        let y = a.mul(b).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(7).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones([3]));
        let x = g.leaf(Tensor::full([3], 2.0), true);
        let y = x.mul(c).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones([2]), true);
        assert!(g.backward(x).is_err());
    }
}
