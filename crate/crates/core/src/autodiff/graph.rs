//! Define-by-run reverse-mode tape.
//!
//! Operations execute eagerly and push a node holding the result plus a
//! boxed backward rule. Nodes are created in topological order, so the
//! backward pass is a single reverse sweep. A graph is confined to one
//! worker; distinct graphs (batch items, CV folds) run in parallel.

use super::tensor::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule for one op. `needs` masks which parent gradients are
/// actually consumed; entries for masked-out parents may be `None`.
pub(crate) trait OpBackward: Send + Sync {
    fn backward(
        &self,
        node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    op: Option<Box<dyn OpBackward>>,
    needs_grad: bool,
}

/// Computation tape. Build one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Insert an input value. Gradients are tracked only when
    /// `requires_grad` is set or the value feeds one that needs it.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        op: Box<dyn OpBackward>,
    ) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            op: Some(op),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across all uses of a value and are readable via [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes.len();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(out_grad) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let parent_values: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].needs_grad)
                    .collect();
                let parent_grads = op.backward(&node.value, &parent_values, &out_grad, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (idx, g) in parent_grads.into_iter().enumerate() {
                    let parent = self.nodes[node.parents[idx].0].needs_grad;
                    if !parent {
                        continue;
                    }
                    let Some(g) = g else { continue };
                    let pvar = self.nodes[i].parents[idx];
                    match &mut self.grads[pvar.0] {
                        Some(acc) => {
                            debug_assert_eq!(acc.shape(), g.shape());
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(g),
                    }
                }
            }
            // Keep leaves' gradients for the caller.
            if self.nodes[i].op.is_none() && self.nodes[i].needs_grad {
                self.grads[i] = Some(out_grad);
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v` (leaves only).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Bind every parameter as a gradient-tracked leaf, in set order.
    pub fn bind(&mut self, params: &ParamSet) -> ParamBinding {
        let vars = params
            .iter()
            .map(|p| self.leaf(p.value.clone(), true))
            .collect();
        ParamBinding { vars }
    }

    /// Collect per-parameter gradients after [`Graph::backward`]. Missing
    /// gradients (parameters unused by the loss) come back as zeros.
    pub fn grads_for(&self, binding: &ParamBinding) -> Vec<Tensor> {
        binding
            .vars
            .iter()
            .map(|v| {
                self.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()))
            })
            .collect()
    }
}

/// Leaf vars for a bound [`ParamSet`], aligned with its order.
pub struct ParamBinding {
    vars: Vec<Var>,
}

impl ParamBinding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
