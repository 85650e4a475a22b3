use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::{ParamStore, Tensor};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Vector-Jacobian product of one recorded op.
///
/// Receives the gradient of the op's output and a flag per parent saying whether
/// that parent needs a gradient; returns one optional gradient per parent.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

struct Node<S> {
    value: Arc<Tensor<S>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
}

/// Append-only record of tensor operations.
///
/// Node ids are assigned in creation order, which is a topological order of the
/// computation, so the backward pass is a single reverse sweep.
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    params: RefCell<BTreeMap<String, usize>>,
    recording: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// A graph that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            recording: true,
        }
    }

    /// A graph for inference: values only, no backward rules are kept.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A node that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.insert(Arc::new(value), Vec::new(), None, false)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.insert(Arc::new(value), Vec::new(), None, self.recording)
    }

    /// Binds a named parameter of `store` into the graph; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<S>, name: &str) -> Result<Var<'_, S>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { graph: self, id });
        }
        let value = store
            .get_arc(name)
            .ok_or_else(|| invalid!("unknown parameter {name:?}"))?;
        let var = self.insert(value, Vec::new(), None, self.recording);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    /// Records a user-defined op with an explicit vector-Jacobian product.
    pub fn custom(
        &self,
        value: Tensor<S>,
        parents: &[Var<'_, S>],
        backward: impl Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>> + 'static,
    ) -> Var<'_, S> {
        self.push(value, parents, Box::new(backward))
    }

    pub(crate) fn push(
        &self,
        value: Tensor<S>,
        parents: &[Var<'_, S>],
        backward: BackwardFn<S>,
    ) -> Var<'_, S> {
        self.push_arc(Arc::new(value), parents, backward)
    }

    pub(crate) fn push_arc(
        &self,
        value: Arc<Tensor<S>>,
        parents: &[Var<'_, S>],
        backward: BackwardFn<S>,
    ) -> Var<'_, S> {
        let requires_grad = self.recording && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        let backward = if requires_grad { Some(backward) } else { None };
        self.insert(value, ids, backward, requires_grad)
    }

    fn insert(
        &self,
        value: Arc<Tensor<S>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<S>>,
        requires_grad: bool,
    ) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<S>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(invalid!(
                "backward needs a single-element output, got shape {:?}",
                out.value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::ones(out.value.shape()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let (Some(backward), true) = (&node.backward, node.requires_grad) else {
                continue;
            };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, S: Scalar> {
    pub(crate) graph: &'g Graph<S>,
    pub(crate) id: usize,
}

impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S: Scalar> Copy for Var<'_, S> {}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<S>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> S {
        self.value().item()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: BTreeMap<String, usize>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params
            .get(name)
            .and_then(|&id| self.grads.get(id))
            .and_then(Option::as_ref)
    }

    /// Gradients of every bound parameter that received one.
    pub fn into_param_grads(mut self) -> BTreeMap<String, Tensor<S>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(name, id)| self.grads[id].take().map(|g| (name, g)))
            .collect()
    }
}
