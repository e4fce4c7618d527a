//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive applied through a [`Tape`] evaluates eagerly and appends a
//! node, so the tape is always in topological order. [`Tape::backward`]
//! replays it in reverse and stores gradients on the nodes that were marked
//! as requiring them (parameters created with [`Tape::param`] or nodes passed
//! to [`Tape::retain_grad`]).

use crate::error::AutogradError;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Softmax probabilities are cached for the backward pass.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MeanSquaredError {
        pred: NodeId,
        target: Vec<f64>,
    },
    L1 {
        pred: NodeId,
        target: Vec<f64>,
    },
    Cosine {
        pred: NodeId,
        target: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::MeanSquaredError { .. } => "mse",
            Op::L1 { .. } => "l1",
            Op::Cosine { .. } => "cosine",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// True if any gradient-requiring node is reachable through the inputs.
    on_grad_path: bool,
}

/// Stabilizer added under the square root of row norms in the cosine loss.
pub const COSINE_EPS: f64 = 1e-12;

/// Ordered record of primitive operations and their values.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Differentiable leaf; its gradient is stored by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Requests that the gradient of an intermediate node be kept.
    pub fn retain_grad(&mut self, id: NodeId) {
        if let Some(node) = self.nodes.get_mut(id.0) {
            node.requires_grad = true;
            node.on_grad_path = true;
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of `id` from the last backward pass, if it was requested.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|n| n.value.grad())
    }

    /// Names of the recorded primitives, in order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let on_grad_path = requires_grad || self.inputs_of(&op).iter().any(|i| self.nodes[i.0].on_grad_path);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            on_grad_path,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op) -> Vec<NodeId> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Tanh(a) | Op::Sum(a) | Op::Mean(a) => vec![a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
            Op::MeanSquaredError { pred, .. } | Op::L1 { pred, .. } | Op::Cosine { pred, .. } => {
                vec![pred]
            }
        }
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutogradError::UnknownNode(id.0))
        }
    }

    fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
        if t.data().iter().all(|v| v.is_finite()) {
            Ok(t)
        } else {
            Err(AutogradError::NonFinite { op })
        }
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_raw(av.data(), bv.data(), n, k, m);
        let value = Self::finite("matmul", Tensor::new(vec![n, m], out)?)?;
        Ok(self.push(Op::MatMul(a, b), value, false))
    }

    /// Adds a `[m]` bias to every row of an `[n, m]` input.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 2 || bv.shape().len() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(AutogradError::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let m = bv.len();
        let b = bv.data();
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % m])
            .collect();
        let value = Self::finite("add_bias", Tensor::new(xv.shape().to_vec(), out)?)?;
        Ok(self.push(Op::AddBias(x, bias), value, false))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AutogradError::ShapeMismatch {
                op: op_name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Self::finite(op_name, Tensor::new(av.shape().to_vec(), out)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value, false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value, false))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let av = self.value(a);
        let out = av.data().iter().map(|v| v * c).collect();
        let value = Self::finite("scale", Tensor::new(av.shape().to_vec(), out)?)?;
        Ok(self.push(Op::Scale(a, c), value, false))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let av = self.value(a);
        let out = av.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(Op::Relu(a), value, false))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let av = self.value(a);
        let out = av.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(Op::Tanh(a), value, false))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        let value = Self::finite("sum", Tensor::scalar(s))?;
        Ok(self.push(Op::Sum(a), value, false))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let value = Self::finite("mean", Tensor::scalar(s))?;
        Ok(self.push(Op::Mean(a), value, false))
    }

    /// Mean over rows of `-log softmax(logits)[label]` for `[n, c]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(AutogradError::LabelOutOfRange {
                    op: "softmax_cross_entropy",
                    label,
                    classes: c,
                });
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                probs[r * c + j] = (v - max).exp() / denom;
            }
            loss += denom.ln() + max - row[label];
        }
        let value = Self::finite("softmax_cross_entropy", Tensor::scalar(loss / n as f64))?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            false,
        ))
    }

    fn check_target(&self, op: &'static str, pred: NodeId, target: &Tensor) -> Result<()> {
        self.check(pred)?;
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(AutogradError::ShapeMismatch {
                op,
                lhs: pv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Mean over all elements of `(pred - target)^2`.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        self.check_target("mse", pred, target)?;
        let pv = self.value(pred);
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let value = Self::finite("mse", Tensor::scalar(s / pv.len() as f64))?;
        Ok(self.push(
            Op::MeanSquaredError {
                pred,
                target: target.data().to_vec(),
            },
            value,
            false,
        ))
    }

    /// Mean over all elements of `|pred - target|`.
    pub fn l1(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        self.check_target("l1", pred, target)?;
        let pv = self.value(pred);
        let s: f64 = pv.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum();
        let value = Self::finite("l1", Tensor::scalar(s / pv.len() as f64))?;
        Ok(self.push(
            Op::L1 {
                pred,
                target: target.data().to_vec(),
            },
            value,
            false,
        ))
    }

    /// Mean over rows of `1 - cos(pred_row, target_row)`.
    pub fn cosine_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        self.check_target("cosine", pred, target)?;
        let pv = self.value(pred);
        let (n, c) = (pv.rows(), pv.cols());
        let mut loss = 0.0;
        for r in 0..n {
            let (p, t) = (pv.row(r), &target.data()[r * c..(r + 1) * c]);
            loss += 1.0 - cosine_parts(p, t).0;
        }
        let value = Self::finite("cosine", Tensor::scalar(loss / n as f64))?;
        Ok(self.push(
            Op::Cosine {
                pred,
                target: target.data().to_vec(),
            },
            value,
            false,
        ))
    }

    /// Backward pass from a scalar output with seed 1.
    pub fn backward_scalar(&mut self, root: NodeId) -> Result<()> {
        self.check(root)?;
        let seed = Tensor::filled(self.value(root).shape(), 1.0);
        self.backward(root, &seed)
    }

    /// Propagates `seed` (the gradient of the objective with respect to
    /// `root`) back through the tape and stores gradients on every node that
    /// requires one. Previously stored gradients are replaced.
    pub fn backward(&mut self, root: NodeId, seed: &Tensor) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(AutogradError::NotRecorded);
        }
        self.check(root)?;
        if seed.shape() != self.value(root).shape() {
            return Err(AutogradError::SeedShape {
                seed: seed.shape().to_vec(),
                output: self.value(root).shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.data().to_vec());

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].on_grad_path {
                continue;
            }
            let contributions = self.node_backward(i, &g);
            for (input, delta) in contributions {
                if !self.nodes[input.0].on_grad_path {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            }
            if self.nodes[i].requires_grad {
                self.nodes[i].value.set_grad(g);
            }
        }
        // Gradient-requiring nodes not reached from the root get exact zeros.
        for node in self.nodes[..=root.0].iter_mut() {
            if node.requires_grad && node.value.grad().is_none() {
                let n = node.value.len();
                node.value.set_grad(vec![0.0; n]);
            }
        }
        for node in &self.nodes[..=root.0] {
            if node.requires_grad && !node.value.is_finite() {
                return Err(AutogradError::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // dA = G B^T, dB = A^T G
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].on_grad_path {
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                    let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bv.data()[p * m..(p + 1) * m];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    out.push((*a, da));
                }
                if !self.nodes[b.0].on_grad_path {
                    return out;
                }
                let mut db = vec![0.0; k * m];
                for r in 0..n {
                    let arow = &av.data()[r * k..(r + 1) * k];
                    let grow = &g[r * m..(r + 1) * m];
                    for (p, &aval) in arow.iter().enumerate() {
                        if aval == 0.0 {
                            continue;
                        }
                        let drow = &mut db[p * m..(p + 1) * m];
                        drow.iter_mut().zip(grow).for_each(|(d, x)| *d += aval * x);
                    }
                }
                out.push((*b, db));
                out
            }
            Op::AddBias(x, b) => {
                let m = self.value(*b).len();
                let mut db = vec![0.0; m];
                for (i, v) in g.iter().enumerate() {
                    db[i % m] += v;
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(av).map(|(x, y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(av)
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                let d = g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect();
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Mean(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * c + label] -= scale;
                }
                vec![(*logits, d)]
            }
            Op::MeanSquaredError { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = 2.0 * g[0] / pv.len() as f64;
                let d = pv.iter().zip(target).map(|(p, t)| scale * (p - t)).collect();
                vec![(*pred, d)]
            }
            Op::L1 { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = g[0] / pv.len() as f64;
                let d = pv
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let diff = p - t;
                        if diff > 0.0 {
                            scale
                        } else if diff < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*pred, d)]
            }
            Op::Cosine { pred, target } => {
                let pv = self.value(*pred);
                let (n, c) = (pv.rows(), pv.cols());
                let scale = g[0] / n as f64;
                let mut d = vec![0.0; n * c];
                for r in 0..n {
                    let (p, t) = (pv.row(r), &target[r * c..(r + 1) * c]);
                    let (cos, pn, tn) = cosine_parts(p, t);
                    for j in 0..c {
                        // d(1 - cos)/dp = -(t / (|p||t|) - cos * p / |p|^2)
                        d[r * c + j] = -scale * (t[j] / (pn * tn) - cos * p[j] / (pn * pn));
                    }
                }
                vec![(*pred, d)]
            }
        }
    }
}

/// Returns `(cos, |p|, |t|)` with both norms stabilized by [`COSINE_EPS`].
fn cosine_parts(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let pn = (p.iter().map(|v| v * v).sum::<f64>() + COSINE_EPS).sqrt();
    let tn = (t.iter().map(|v| v * v).sum::<f64>() + COSINE_EPS).sqrt();
    (dot / (pn * tn), pn, tn)
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for p in 0..k {
            let aval = a[r * k + p];
            if aval == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aval * bv);
        }
    }
    out
}
