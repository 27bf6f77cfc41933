//! Tape linearization, reverse pass, and the finite-difference oracle.

use std::collections::HashSet;

use super::Tensor;
use crate::error::{TensorError, TensorResult};

/// Topologically ordered view of the graph reachable from one output:
/// node ids are assigned in creation order, so ascending id order puts every
/// node's inputs before it.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    /// Collect the gradient-requiring subgraph below `output`.
    pub fn trace(output: &Tensor) -> Tape {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut stack = vec![output.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.node().op {
                for input in op.inputs() {
                    stack.push(input.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.id());
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Ids in tape order; exposed so tests can assert the topological
    /// invariant directly.
    pub fn ids(&self) -> Vec<u64> {
        self.nodes.iter().map(|t| t.id()).collect()
    }

    /// Reverse sweep: seeds the output with dL/dL = 1 and applies each
    /// recorded backward rule in reverse topological order.
    pub fn backprop(&self, output: &Tensor) -> TensorResult<()> {
        output.accumulate_grad(&[1.0]);
        for t in self.nodes.iter().rev() {
            let grad = match t.grad() {
                Some(g) => g,
                None => continue, // no path from the loss reached this node
            };
            if let Some(op) = &t.node().op {
                let out_data = t.data();
                op.backward(&out_data, &grad);
            }
        }
        Ok(())
    }
}

/// Reverse-mode differentiation of a scalar loss: populates `grad` on every
/// gradient-requiring tensor in the graph below it.
pub fn backward(loss: &Tensor) -> TensorResult<()> {
    if loss.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(TensorError::Contract(
            "backward on a tensor with no gradient-requiring ancestors".into(),
        ));
    }
    Tape::trace(loss).backprop(loss)
}

/// Compare the reverse-mode gradient of `f` at `x` against central finite
/// differences, returning the maximum elementwise relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` is re-invoked for every probe, so it must be a pure function of the
/// current contents of `x` (stochastic functions must freeze their noise).
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    assert!(x.requires_grad() && x.is_leaf(), "grad_check probes a leaf parameter");
    x.zero_grad();
    let loss = f(x);
    assert_eq!(loss.numel(), 1, "grad_check requires a scalar-valued function");
    backward(&loss).expect("backward failed during grad_check");
    let analytic = x.grad().expect("no gradient reached x");

    let n = x.numel();
    let mut max_err: f64 = 0.0;
    for i in 0..n {
        let orig = x.data()[i];
        perturb(x, i, orig + h);
        let up = f(x).item();
        perturb(x, i, orig - h);
        let down = f(x).item();
        perturb(x, i, orig);
        let numeric = (up - down) / (2.0 * h);
        let denom = 1.0_f64.max(analytic[i].abs()).max(numeric.abs());
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    max_err
}

fn perturb(x: &Tensor, i: usize, value: f64) {
    let mut data = x.to_vec();
    data[i] = value;
    x.set_data(&data);
}
