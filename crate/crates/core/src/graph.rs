//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] is built eagerly: every operation computes its value as it is
//! recorded, and keeps whatever it needs for the backward sweep. Trainable
//! leaves are registered by name; [`Graph::backward_gradients`] returns one
//! gradient per registered leaf, zero-filled when the output does not depend
//! on it.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{Real, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter `{0}` is not bound in this graph")]
    UnknownParam(String),
    #[error("parameter `{0}` bound twice")]
    DuplicateParam(String),
    #[error("output must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requested before forward evaluation")]
    NoForward,
    #[error("{op}: {detail}")]
    Numerical { op: &'static str, detail: String },
}

/// A recorded operation: knows its inputs and how to pull a gradient back
/// through itself.
pub trait Op<F: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> &[Var];

    /// Vector-Jacobian product. `wants[k]` tells whether input `k` needs a
    /// gradient; entries for inputs that do not may be `None`. Returned
    /// gradients must have the shape of the corresponding input.
    fn backward(
        &self,
        graph: &Graph<F>,
        output: &Tensor<F>,
        grad: &Tensor<F>,
        wants: &[bool],
    ) -> Vec<Option<Tensor<F>>>;

    /// Appends the discrete state that picks the op's current linear piece
    /// (ReLU signs, pooling winners). Smooth ops append nothing.
    fn branch_state(&self, _graph: &Graph<F>, _out: &mut Vec<usize>) {}
}

enum NodeKind<F: Real> {
    Param,
    Constant,
    Op(Box<dyn Op<F>>),
}

struct Node<F: Real> {
    value: Tensor<F>,
    kind: NodeKind<F>,
    needs_grad: bool,
}

/// Named collection of parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

/// Gradients share the parameter layout.
pub type Gradients<F> = ParamSet<F>;

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Merges another set in; entries of `other` win on name clashes.
    pub fn extend(&mut self, other: ParamSet<F>) {
        self.tensors.extend(other.tensors);
    }
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, Var>,
    output: Option<Var>,
    fault: Option<String>,
    replay: Option<(Vec<usize>, usize)>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            output: None,
            fault: None,
            replay: None,
        }
    }

    /// Forces piecewise ops recorded from now on to follow `state` (as
    /// returned by [`Graph::branch_state`] of a graph built the same way)
    /// instead of choosing their own piece. Meant for forward evaluation in
    /// gradient checks; backward passes of such a graph are not meaningful.
    pub fn replay_branches(&mut self, state: Vec<usize>) {
        self.replay = Some((state, 0));
    }

    /// Next `n` entries of the replayed branch state, if replaying.
    pub(crate) fn next_branches(&mut self, n: usize) -> Option<Vec<usize>> {
        let (state, cursor) = self.replay.as_mut()?;
        let end = (*cursor + n).min(state.len());
        let out = state[*cursor..end].to_vec();
        *cursor = end;
        Some(out)
    }

    /// Verification hook: every backward pass through an op named `op` adds
    /// 1.0 to the first element of its first input gradient. Used to prove
    /// that the gradient checker catches a broken derivative.
    pub fn inject_fault(&mut self, op: Option<&str>) {
        self.fault = op.map(str::to_string);
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<F>) -> Result<Var, GraphError> {
        if self.params.contains_key(name) {
            return Err(GraphError::DuplicateParam(name.to_string()));
        }
        let v = self.push(Node {
            value,
            kind: NodeKind::Param,
            needs_grad: true,
        });
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Registers every tensor of `params` as a trainable leaf.
    pub fn bind(&mut self, params: &ParamSet<F>) -> Result<(), GraphError> {
        for (name, t) in params.iter() {
            self.param(name, t.clone())?;
        }
        Ok(())
    }

    pub fn param_var(&self, name: &str) -> Result<Var, GraphError> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Node {
            value,
            kind: NodeKind::Constant,
            needs_grad: false,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends an operation node whose value has already been computed.
    pub fn record(&mut self, op: impl Op<F> + 'static, value: Tensor<F>) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(Node {
            value,
            kind: NodeKind::Op(Box::new(op)),
            needs_grad,
        })
    }

    fn push(&mut self, node: Node<F>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn node_name(&self, idx: usize) -> &'static str {
        match &self.nodes[idx].kind {
            NodeKind::Param => "param",
            NodeKind::Constant => "constant",
            NodeKind::Op(op) => op.name(),
        }
    }

    /// Concatenated branch state of every recorded op. Two evaluations with
    /// equal states lie on the same smooth piece of a piecewise function.
    pub fn branch_state(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let NodeKind::Op(op) = &node.kind {
                op.branch_state(self, &mut out);
            }
        }
        out
    }

    /// Marks `output` as the scalar loss and validates every recorded value.
    /// Returns the loss value.
    pub fn forward_eval(&mut self, output: Var) -> Result<F, GraphError> {
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(GraphError::NotScalar(out.shape().to_vec()));
        }
        if let Some(idx) = self.nodes.iter().position(|n| !n.value.all_finite()) {
            return Err(GraphError::NonFinite {
                node: idx,
                op: self.node_name(idx),
            });
        }
        self.output = Some(output);
        Ok(self.nodes[output.0].value.item())
    }

    /// Gradient of the evaluated output with respect to every registered
    /// parameter.
    pub fn backward_gradients(&self) -> Result<Gradients<F>, GraphError> {
        let output = self.output.ok_or(GraphError::NoForward)?;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(self.nodes[output.0].value.shape()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let NodeKind::Op(op) = &node.kind else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs = op.inputs();
            let wants: Vec<bool> = inputs.iter().map(|i| self.nodes[i.0].needs_grad).collect();
            let mut input_grads = op.backward(self, &node.value, &grad, &wants);
            if self.fault.as_deref() == Some(op.name()) {
                if let Some(g) = input_grads.iter_mut().flatten().next() {
                    g.data_mut()[0] += F::one();
                }
            }
            debug_assert_eq!(input_grads.len(), inputs.len(), "{}", op.name());
            for ((input, g), want) in inputs.iter().zip(input_grads).zip(wants) {
                let (Some(g), true) = (g, want) else { continue };
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[input.0].value.shape(),
                    "gradient shape from {}",
                    op.name()
                );
                match &mut grads[input.0] {
                    Some(acc) => acc.add_scaled(&g, F::one()),
                    slot => *slot = Some(g),
                }
            }
        }

        let mut out = ParamSet::new();
        for (name, var) in &self.params {
            let g = grads[var.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[var.0].value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn sum_of_zeros_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::zeros(&[2, 2])).unwrap();
        let s = ops::sum(&mut g, x);
        assert_eq!(g.forward_eval(s).unwrap(), 0.0);
    }

    #[test]
    fn sum_of_squares_and_its_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[3], &[1., 2., 3.])).unwrap();
        let sq = ops::mul(&mut g, x, x).unwrap();
        let s = ops::sum(&mut g, sq);
        assert_eq!(g.forward_eval(s).unwrap(), 14.0);
        let grads = g.backward_gradients().unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn identity_of_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::scalar(7.5)).unwrap();
        assert_eq!(g.forward_eval(x).unwrap(), 7.5);
        let grads = g.backward_gradients().unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 1.0);
    }

    #[test]
    fn linear_sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[2, 3], &[0.3, -1., 4., 2., 0., 9.])).unwrap();
        let s = ops::sum(&mut g, x);
        g.forward_eval(s).unwrap();
        let grads = g.backward_gradients().unwrap();
        assert_eq!(grads.get("x").unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn unreached_leaf_gets_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[2], &[1., 2.])).unwrap();
        g.param("y", t(&[3], &[1., 2., 3.])).unwrap();
        let s = ops::sum(&mut g, x);
        g.forward_eval(s).unwrap();
        let grads = g.backward_gradients().unwrap();
        assert_eq!(grads.get("y").unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[2], &[1., 2.])).unwrap();
        ops::sum(&mut g, x);
        assert_eq!(g.backward_gradients().unwrap_err(), GraphError::NoForward);
    }

    #[test]
    fn non_finite_value_names_producer() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[2], &[0.0, 1.0])).unwrap();
        let l = ops::log(&mut g, x);
        let s = ops::sum(&mut g, l);
        match g.forward_eval(s).unwrap_err() {
            GraphError::NonFinite { op, .. } => assert_eq!(op, "log"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[2], &[0.0, 1.0])).unwrap();
        assert!(matches!(g.forward_eval(x), Err(GraphError::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[2], &[0.0, 1.0])).unwrap();
        let y = g.param("y", t(&[3], &[0.0, 1.0, 2.0])).unwrap();
        assert!(ops::add(&mut g, x, y).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x) + sum(x) -> grad 2
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t(&[2], &[0.5, 1.0])).unwrap();
        let a = ops::sum(&mut g, x);
        let b = ops::sum(&mut g, x);
        let f = ops::add(&mut g, a, b).unwrap();
        g.forward_eval(f).unwrap();
        let grads = g.backward_gradients().unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 2.0]);
    }
}
