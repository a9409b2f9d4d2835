//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every executed operation in order. Nodes only ever
//! reference earlier nodes, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.

mod conv;
mod deform;
mod elementwise;
mod norm;
mod reduce;
mod shape_ops;

pub use conv::{conv2d_forward, Padding};
pub use deform::{bilinear, tap_offset, TAPS};
pub use elementwise::Unary;
pub use reduce::Reduce;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one node.
///
/// Arguments: input values, output value, upstream gradient, and which inputs
/// need a gradient. Returns one entry per input.
pub(crate) type BackwardFn<S> =
    Box<dyn Fn(&[&Tensor<S>], &Tensor<S>, &Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>> + Send>;

struct Node<S> {
    op: &'static str,
    value: Tensor<S>,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Operation names in execution order.
    pub fn ops(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.op)
    }

    pub(crate) fn values(&self, vars: &[Var]) -> Vec<&Tensor<S>> {
        vars.iter().map(|v| &self.nodes[v.0].value).collect()
    }

    /// Appends an operation result. Fails if the forward value is not finite.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<S>,
        inputs: Vec<Var>,
        backward: BackwardFn<S>,
    ) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { op, node });
        }
        debug_assert!(inputs.iter().all(|v| v.0 < node));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs,
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        });
        Ok(Var(node))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(shape));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let inputs = self.values(&node.inputs);
            let input_grads = backward(&inputs, &node.value, &g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((v, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                debug_assert_eq!(ig.shape(), self.shape(*v), "gradient shape for {}", node.op);
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        // Interior gradients were released during the sweep; leaves keep theirs.
        Ok(Gradients { grads })
    }
}

/// Output of [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
