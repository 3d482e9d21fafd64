use std::collections::HashMap;

use crate::error::{KernelError, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Maps (input values, output value, output gradient) to one gradient per input.
pub(crate) type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A tape of recorded operations.
///
/// Values are kept for the lifetime of the graph. With gradients disabled
/// no backward closures are stored and `backward` is rejected.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            param_nodes: HashMap::new(),
        }
    }

    /// A graph that records values only.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: "constant",
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a learned parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: "param",
            value: store.value(id).clone(),
            inputs: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op result. Rejects non-finite outputs.
    pub(crate) fn push<F>(&mut self, op: &'static str, value: Tensor, inputs: &[Var], backward: F) -> Result<Var>
    where
        F: Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        if !value.is_finite() {
            return Err(KernelError::NonFinite { op });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Accumulates d(loss)/d(param) into every reachable parameter's gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(KernelError::Detached(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        self.backward_from(loss, Tensor::full(node.value.shape(), 1.0), store)
    }

    /// Backpropagates an arbitrary output gradient `seed` from `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor, store: &mut ParamStore) -> Result<()> {
        if !self.grad_enabled {
            return Err(KernelError::Detached("graph was recorded without gradients".into()));
        }
        let node = &self.nodes[out.0];
        if !node.requires_grad {
            return Err(KernelError::Detached(format!(
                "`{}` node does not depend on any parameter",
                node.op
            )));
        }
        if seed.shape() != node.value.shape() {
            return Err(KernelError::Shape {
                op: "backward",
                detail: format!("seed {:?} vs output {:?}", seed.shape(), node.value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(id) = node.param {
                store.accumulate_grad(id, &g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = bw(&inputs, &node.value, &g);
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[j].value.shape(), "grad shape for {}", self.nodes[j].op);
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }
}
