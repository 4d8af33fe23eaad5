//! Define-by-run computation graph.
//!
//! Nodes are appended in execution order, so insertion order is already a
//! topological order and backward is a single reverse sweep. Every op
//! validates shapes up front and checks its output for non-finite values, so
//! a NaN is reported at the op that produced it rather than ten ops later.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a graph node. Cheap to copy; only valid for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct BackwardArgs<'a> {
    pub out_data: &'a [f32],
    pub out_grad: &'a [f64],
    pub inputs: &'a [(&'a [usize], &'a [f32])],
    /// Which inputs need a gradient; closures may return `None` for the rest.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op_name: &'static str,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    /// Copies a tensor in as a leaf; gradient tracking follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            data: t.data.clone(),
            grad: None,
            requires_grad: t.requires_grad,
            op_name: "leaf",
            inputs: vec![],
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf from raw data.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar_const(&mut self, v: f32) -> Result<Var> {
        self.constant(&[], vec![v])
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    /// Scalar value of a one-element node.
    pub fn value(&self, v: Var) -> f32 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Accumulated gradient, present only after a backward pass reached v.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Snapshot of a node as a tensor (detached from the graph).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub(crate) fn push_op(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: Vec<usize>,
        backward: BackwardFn,
    ) -> Result<Var> {
        debug_assert_eq!(data.len(), super::numel(&shape));
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name.into() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op_name,
            inputs,
            backward: Some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn check_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.nodes[v.0].shape.len() != rank {
            return Err(Error::shape(
                op,
                format!("expected rank {rank}, got shape {:?}", self.nodes[v.0].shape),
            ));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss. Contributions of this call are added
    /// onto any gradients accumulated by earlier backward calls, so two
    /// backward passes from two losses leave the sum of both gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let l = loss.0;
        if self.nodes[l].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[l].shape),
            ));
        }
        let mut pending: Vec<Option<Vec<f64>>> = (0..=l).map(|_| None).collect();
        pending[l] = Some(vec![1.0]);
        for i in (0..=l).rev() {
            let Some(g) = pending[i].take() else { continue };
            if self.nodes[i].requires_grad {
                if let Some(bw) = self.nodes[i].backward.take() {
                    let input_idx = std::mem::take(&mut self.nodes[i].inputs);
                    let needs: Vec<bool> =
                        input_idx.iter().map(|&j| self.nodes[j].requires_grad).collect();
                    if needs.iter().any(|&b| b) {
                        let views: Vec<(&[usize], &[f32])> = input_idx
                            .iter()
                            .map(|&j| (&self.nodes[j].shape[..], &self.nodes[j].data[..]))
                            .collect();
                        let args = BackwardArgs {
                            out_data: &self.nodes[i].data,
                            out_grad: &g,
                            inputs: &views,
                            needs: &needs,
                        };
                        let contribs = bw(&args);
                        debug_assert_eq!(contribs.len(), input_idx.len(), "{}", self.nodes[i].op_name);
                        drop(args);
                        drop(views);
                        for (&j, c) in input_idx.iter().zip(contribs) {
                            let Some(c) = c else { continue };
                            if !self.nodes[j].requires_grad {
                                continue;
                            }
                            debug_assert_eq!(c.len(), self.nodes[j].data.len());
                            match &mut pending[j] {
                                Some(buf) => add_assign(buf, &c),
                                None => pending[j] = Some(c),
                            }
                        }
                    }
                    self.nodes[i].inputs = input_idx;
                    self.nodes[i].backward = Some(bw);
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(buf) => add_assign(buf, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap().with_requires_grad(true)
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(&param(&[2], vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_through_fan_out_sums_both_paths() {
        // y = x*x + x  =>  dy/dx = 2x + 1 = 7 at x = 3
        let mut g = Graph::new();
        let x = g.leaf(&param(&[], vec![3.0]));
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn backward_is_additive_across_calls() {
        // Two calls from two losses leave the sum of both gradients.
        let mut g = Graph::new();
        let x = g.leaf(&param(&[], vec![2.0]));
        let a = g.mul(x, x).unwrap(); // da/dx = 4
        let b = g.scale(x, 3.0).unwrap(); // db/dx = 3
        g.backward(a).unwrap();
        g.backward(b).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
        g.backward(a).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[11.0]);
    }

    #[test]
    fn constants_get_no_gradient_buffer() {
        let mut g = Graph::new();
        let x = g.leaf(&param(&[], vec![2.0]));
        let c = g.scalar_const(5.0).unwrap();
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn op_producing_non_finite_reports_the_op() {
        let mut g = Graph::new();
        let x = g.leaf(&param(&[], vec![1e30]));
        let err = g.mul(x, x).unwrap_err();
        match err {
            Error::NonFinite { op } => assert_eq!(op, "mul"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_grads_clears_accumulation() {
        let mut g = Graph::new();
        let x = g.leaf(&param(&[], vec![2.0]));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.zero_grads();
        assert!(g.grad(x).is_none());
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }
}
