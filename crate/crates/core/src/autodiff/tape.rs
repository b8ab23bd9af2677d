//! Tape-based reverse-mode differentiation over tensor operations.
//!
//! A [`Tape`] records every operation of a forward pass as a [`Node`] holding
//! the op's output value, its parent node ids, and a backward rule. Calling
//! [`Tape::backward`] on a scalar loss sweeps the node list in reverse,
//! accumulating cotangents, and returns the gradient of every registered
//! parameter. A tape is single-writer during construction and backward;
//! independent tapes may run concurrently.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use std::collections::BTreeMap;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Reverse rule of one recorded operation: given the cotangent of the output,
/// the parent values, and the output value, produce one cotangent per parent.
pub trait BackwardRule<T: Scalar>: Send + Sync {
    fn backward(
        &self,
        grad: &Tensor<T>,
        parents: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Vec<Tensor<T>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    rule: Option<Box<dyn BackwardRule<T>>>,
}

/// Named parameter set. `BTreeMap` keeps iteration (and therefore optimizer
/// and serialization order) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    by_param: BTreeMap<String, Tensor<T>>,
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a registered parameter (zeros if the parameter never
    /// reached the loss).
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    /// Gradient w.r.t. an arbitrary node, if it influenced the loss.
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_param.iter()
    }

    pub fn into_param_map(self) -> BTreeMap<String, Tensor<T>> {
        self.by_param
    }
}

/// Recorded computation graph plus the registry of named parameter leaves.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that does not require gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Vec::new(), None)
    }

    /// Registers (or re-uses) a named trainable leaf. Registering the same
    /// name twice returns the existing node so that shared weights accumulate
    /// gradients at a single site.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            debug_assert_eq!(
                self.nodes[id.0].value.dims(),
                t.dims(),
                "param {name} dims changed"
            );
            return id;
        }
        let id = self.push(t.clone(), Vec::new(), None);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<NodeId>,
        rule: Option<Box<dyn BackwardRule<T>>>,
    ) -> NodeId {
        debug_assert!(
            parents.iter().all(|p| p.0 < self.nodes.len()),
            "parent from another tape"
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents,
            rule,
        });
        id
    }

    /// Reverse accumulation from a scalar loss node. Every registered
    /// parameter receives a gradient; parameters the loss never reached get
    /// zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "loss must be scalar, got dims {:?}",
                self.nodes[loss.0].value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar_tensor(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(rule) = &node.rule {
                let parent_vals: Vec<&Tensor<T>> = node
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect();
                let parent_grads = rule.backward(&g, &parent_vals, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(
                        pg.dims(),
                        self.nodes[p.0].value.dims(),
                        "rule produced wrong grad dims at node {i}"
                    );
                    match &mut grads[p.0] {
                        Some(acc) => acc.axpy(T::one(), &pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }

        let by_param = self
            .params
            .iter()
            .map(|(name, &id)| {
                let g = grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.dims()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients {
            by_param,
            by_node: grads,
        })
    }
}
