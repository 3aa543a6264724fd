//! Tape-style reverse-mode differentiation over a fixed set of primitives.
//!
//! Values are computed eagerly as nodes are pushed, so the node list is
//! always in topological order. `backward` walks it in reverse.

use std::collections::BTreeMap;

use super::{Matrix, Rng};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// Mask entries are either 0 or `1 / (1 - rate)`.
    Dropout(NodeId, Matrix),
    /// Mean of squared differences over every entry.
    Mse(NodeId, NodeId),
    /// Columns are samples; loss is averaged over columns.
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::contract(format!("node {} does not exist", id.0)))
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// The dropout mask recorded for `id`, if it is a dropout node.
    pub fn mask(&self, id: NodeId) -> Option<&Matrix> {
        match &self.nodes.get(id.0)?.op {
            Op::Dropout(_, mask) => Some(mask),
            _ => None,
        }
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.node(a)?.value.matmul(&self.node(b)?.value)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.node(a)?.value.add(&self.node(b)?.value)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Adds a column vector to every column of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = self.node(x)?.value.add_column(&self.node(bias)?.value)?;
        Ok(self.push(Op::AddBias(x, bias), value))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let value = self.node(x)?.value.scale(s);
        Ok(self.push(Op::Scale(x, s), value))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.node(x)?.value.map(|v| v.max(0.0));
        Ok(self.push(Op::Relu(x), value))
    }

    /// Inverted dropout. A fresh mask is drawn from `rng` and recorded so the
    /// backward pass reuses it exactly.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        let (rows, cols) = self.node(x)?.value.shape();
        let keep = 1.0 / (1.0 - rate);
        let mask = Matrix::from_fn(
            rows,
            cols,
            |_, _| {
                if rng.uniform() < rate {
                    0.0
                } else {
                    keep
                }
            },
        );
        self.dropout_with_mask(x, mask)
    }

    pub fn dropout_with_mask(&mut self, x: NodeId, mask: Matrix) -> Result<NodeId> {
        let value = self.node(x)?.value.hadamard(&mask)?;
        Ok(self.push(Op::Dropout(x, mask), value))
    }

    pub fn mse(&mut self, prediction: NodeId, target: NodeId) -> Result<NodeId> {
        let diff = self
            .node(prediction)?
            .value
            .sub(&self.node(target)?.value)?;
        let n = diff.len().max(1) as f64;
        let value = Matrix::filled(1, 1, diff.frobenius_sq() / n);
        Ok(self.push(Op::Mse(prediction, target), value))
    }

    /// Mean cross-entropy of softmax over each column of `logits`
    /// (`classes x batch`) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = &self.node(logits)?.value;
        if labels.len() != z.cols() {
            return Err(Error::contract(format!(
                "{} labels for a batch of {}",
                labels.len(),
                z.cols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.rows()) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                z.rows()
            )));
        }
        let probs = softmax_columns(z);
        let mut total = 0.0;
        for (j, &label) in labels.iter().enumerate() {
            total -= probs.get(label, j).ln();
        }
        let value = Matrix::filled(1, 1, total / labels.len().max(1) as f64);
        Ok(self.push(Op::SoftmaxCrossEntropy(logits, labels.to_vec()), value))
    }

    /// Gradients of the scalar at `loss` with respect to each of `leaves`.
    /// Leaves the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: NodeId, leaves: &[NodeId]) -> Result<BTreeMap<NodeId, Matrix>> {
        let loss_node = self.node(loss)?;
        if loss_node.value.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "loss node must be scalar, got {:?}",
                loss_node.value.shape()
            )));
        }
        for &leaf in leaves {
            if !matches!(self.node(leaf)?.op, Op::Leaf) {
                return Err(Error::contract(format!("node {} is not a leaf", leaf.0)));
            }
        }

        let mut adjoints: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    adjoints[idx] = Some(upstream);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let ga = upstream.matmul(&vb.transpose())?;
                    let gb = va.transpose().matmul(&upstream)?;
                    accumulate(&mut adjoints, *a, ga)?;
                    accumulate(&mut adjoints, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, upstream.clone())?;
                    accumulate(&mut adjoints, *b, upstream)?;
                }
                Op::AddBias(x, bias) => {
                    let gb = upstream.row_sums();
                    accumulate(&mut adjoints, *x, upstream)?;
                    accumulate(&mut adjoints, *bias, gb)?;
                }
                Op::Scale(x, s) => {
                    accumulate(&mut adjoints, *x, upstream.scale(*s))?;
                }
                Op::Relu(x) => {
                    let input = &self.nodes[x.0].value;
                    let g =
                        upstream.zip_with(
                            input,
                            "relu_backward",
                            |g, v| {
                                if v > 0.0 {
                                    g
                                } else {
                                    0.0
                                }
                            },
                        )?;
                    accumulate(&mut adjoints, *x, g)?;
                }
                Op::Dropout(x, mask) => {
                    accumulate(&mut adjoints, *x, upstream.hadamard(mask)?)?;
                }
                Op::Mse(p, t) => {
                    let seed = upstream.get(0, 0);
                    let diff = self.nodes[p.0].value.sub(&self.nodes[t.0].value)?;
                    let n = diff.len().max(1) as f64;
                    let gp = diff.scale(2.0 * seed / n);
                    let gt = gp.scale(-1.0);
                    accumulate(&mut adjoints, *p, gp)?;
                    accumulate(&mut adjoints, *t, gt)?;
                }
                Op::SoftmaxCrossEntropy(z, labels) => {
                    let seed = upstream.get(0, 0);
                    let mut g = softmax_columns(&self.nodes[z.0].value);
                    for (j, &label) in labels.iter().enumerate() {
                        g.set(label, j, g.get(label, j) - 1.0);
                    }
                    let batch = labels.len().max(1) as f64;
                    accumulate(&mut adjoints, *z, g.scale(seed / batch))?;
                }
            }
        }

        let mut out = BTreeMap::new();
        for &leaf in leaves {
            let grad = match adjoints.get(leaf.0).and_then(|a| a.as_ref()) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = self.nodes[leaf.0].value.shape();
                    Matrix::zeros(r, c)
                }
            };
            out.insert(leaf, grad);
        }
        Ok(out)
    }
}

fn accumulate(adjoints: &mut [Option<Matrix>], id: NodeId, grad: Matrix) -> Result<()> {
    match &mut adjoints[id.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}

fn softmax_columns(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for j in 0..z.cols() {
        let max = (0..z.rows()).fold(f64::NEG_INFINITY, |m, i| m.max(z.get(i, j)));
        let mut denom = 0.0;
        for i in 0..z.rows() {
            let e = (z.get(i, j) - max).exp();
            out.set(i, j, e);
            denom += e;
        }
        for i in 0..z.rows() {
            out.set(i, j, out.get(i, j) / denom);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_gradient() {
        // L = 1/2 ||x||^2 expressed as (n/2) * mse(x, 0).
        let mut g = Graph::new();
        let x = g.leaf(Matrix::column(&[1.0, -2.0]));
        let zero = g.leaf(Matrix::zeros(2, 1));
        let mse = g.mse(x, zero).unwrap();
        let loss = g.scale(mse, 1.0).unwrap();
        let grads = g.backward(loss, &[x]).unwrap();
        assert_eq!(grads[&x], Matrix::column(&[1.0, -2.0]));
    }

    #[test]
    fn mse_of_linear_map_hand_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Matrix::from_rows(&[[1.0]]));
        let x = g.leaf(Matrix::from_rows(&[[2.0]]));
        let y = g.leaf(Matrix::from_rows(&[[0.0]]));
        let pred = g.matmul(w, x).unwrap();
        let loss = g.mse(pred, y).unwrap();
        assert_eq!(g.value(loss).get(0, 0), 4.0);
        let grads = g.backward(loss, &[w]).unwrap();
        assert_eq!(grads[&w], Matrix::from_rows(&[[8.0]]));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::column(&[1.0, 2.0]));
        let unused = g.leaf(Matrix::filled(3, 2, 5.0));
        let zero = g.leaf(Matrix::zeros(2, 1));
        let loss = g.mse(a, zero).unwrap();
        let grads = g.backward(loss, &[unused]).unwrap();
        assert_eq!(grads[&unused], Matrix::zeros(3, 2));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::zeros(2, 2));
        assert!(matches!(g.backward(a, &[a]), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_routes_gradient_through_kept_entries() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::filled(4, 8, 1.0));
        let mut rng = Rng::new(3);
        let d = g.dropout(x, 0.5, &mut rng).unwrap();
        let zero = g.leaf(Matrix::zeros(4, 8));
        let loss = g.mse(d, zero).unwrap();
        let grads = g.backward(loss, &[x]).unwrap();
        let mask = g.mask(d).unwrap();
        for (gv, mv) in grads[&x].data().iter().zip(mask.data()) {
            assert_eq!(*gv == 0.0, *mv == 0.0);
        }
    }

    #[test]
    fn dropout_rate_outside_unit_interval_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::zeros(1, 1));
        assert!(g.dropout(x, 1.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let z = g.leaf(Matrix::zeros(4, 2));
        let loss = g.softmax_cross_entropy(z, &[0, 3]).unwrap();
        assert!((g.value(loss).get(0, 0) - 4f64.ln()).abs() < 1e-15);
    }
}
