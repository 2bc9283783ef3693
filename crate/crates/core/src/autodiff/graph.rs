use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node inside one [`Graph`]. Not transferable between graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Backward rule recorded by a forward op.
///
/// Nodes are created in execution order, so every input id is strictly
/// smaller than the output id. `grads` covers exactly the nodes below the
/// output; buffers are allocated lazily through [`accumulate`].
pub(crate) trait BackwardOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>);
}

pub(crate) struct BackwardCtx<'a> {
    pub values: &'a [Tensor],
    pub requires_grad: &'a [bool],
    pub grad_out: &'a [f64],
    grads: &'a mut [Option<Vec<f64>>],
}

impl BackwardCtx<'_> {
    /// Gradient buffer for node `id`, or `None` when the node does not
    /// require gradients (its buffer is never allocated).
    pub fn accumulate(&mut self, id: NodeId) -> Option<&mut [f64]> {
        if !self.requires_grad[id.0] {
            return None;
        }
        let len = self.values[id.0].numel();
        Some(self.grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    back: Option<Box<dyn BackwardOp>>,
}

/// Reverse-mode tape over [`Tensor`] values.
///
/// Forward ops append nodes in execution order; [`Graph::backward`] walks the
/// tape once in reverse, accumulating chain-rule contributions. Execution is
/// strictly serial, so results are bit-reproducible for identical inputs.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    back: Vec<Option<Box<dyn BackwardOp>>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a leaf that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Node {
            value,
            requires_grad: false,
            back: None,
        })
    }

    /// Insert a leaf whose gradient is wanted after [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Node {
            value,
            requires_grad: true,
            back: None,
        })
    }

    fn push(&mut self, node: Node) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(node.value);
        self.requires_grad.push(node.requires_grad);
        self.back.push(node.back);
        self.grads.push(None);
        id
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor,
        inputs: &[NodeId],
        back: Box<dyn BackwardOp>,
    ) -> NodeId {
        let requires = inputs.iter().any(|id| self.requires_grad[id.0]);
        self.push(Node {
            value,
            requires_grad: requires,
            back: requires.then_some(back),
        })
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires_grad[id.0]
    }

    /// Gradient of the last [`Graph::backward`] loss w.r.t. node `id`.
    ///
    /// `None` when the node does not require gradients or no finite
    /// contribution reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reverse pass from a scalar loss node.
    ///
    /// Visits each recorded op exactly once, in reverse execution order.
    /// Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            if let Some(op) = &self.back[id] {
                let (below, rest) = self.grads.split_at_mut(id);
                let grad_out = rest[0].as_deref().expect("checked above");
                let mut ctx = BackwardCtx {
                    values: &self.values,
                    requires_grad: &self.requires_grad,
                    grad_out,
                    grads: below,
                };
                op.backward(&mut ctx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![3], vec![1.0, -2.0, 5.5]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        // d/dx sum(x^2) = 2x; at x = 3 the gradient is 6.
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let sq = g.square(x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(3.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }
}
