//! Reverse-mode differentiation over a recorded forward order.
//!
//! Every node stores its forward value. Calling [`Graph::backward`] walks the
//! nodes in reverse insertion order and asks each operation for the gradients
//! of its inputs.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A differentiable operation with a hand-written backward rule.
pub trait DiffOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Gradients of a scalar head with respect to each input, given the
    /// gradient with respect to this operation's output. Entries are `None`
    /// where `needs` is false.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Option<Box<dyn DiffOp<T>>>,
    inputs: Vec<Var>,
    tracks_grad: bool,
}

/// Forward tape. Values are immutable once recorded.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None, Vec::new(), true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None, Vec::new(), false)
    }

    pub fn apply(&mut self, op: impl DiffOp<T> + 'static, inputs: &[Var]) -> Result<Var> {
        let value = {
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&refs)?
        };
        let tracks = inputs.iter().any(|v| self.nodes[v.0].tracks_grad);
        Ok(self.push(value, Some(Box::new(op)), inputs.to_vec(), tracks))
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Option<Box<dyn DiffOp<T>>>,
        inputs: Vec<Var>,
        tracks_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            tracks_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the one-element node `loss` with respect to every
    /// tracked node recorded before it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "Graph::backward",
                format!("loss must have one element, shape is {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            if !node.tracks_grad {
                continue;
            }
            let Some(grad_out) = grads[idx].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].tracks_grad)
                .collect();
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad_out, &needs)?;
            for (var, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[var.0].tracks_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(grad_out);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when no path reaches it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
