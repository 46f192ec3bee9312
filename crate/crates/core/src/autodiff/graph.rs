use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Index of a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations the tape can record.
///
/// Shape rules:
///
/// | kind | parents | output |
/// |------|---------|--------|
/// | `MatMul` | `[m,k]`, `[k,n]` | `[m,n]` |
/// | `Add`, `Sub`, `Mul` | two tensors of identical shape | same shape |
/// | `Scale(c)`, `Sigmoid`, `Tanh`, `Relu`, `Log`, `XLogX`, `Square` | any | same shape |
/// | `Softmax`, `LogSoftmax` | `[n]` or `[m,n]` | same shape, normalised per row |
/// | `Sum`, `Mean` | any | `[1]` |
/// | `BroadcastRow(m)` | `[n]` or `[1,n]` | `[m,n]` |
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    LogSoftmax,
    Log,
    /// `x·ln x` with `0·ln 0 = 0`.
    XLogX,
    Square,
    Sum,
    Mean,
    BroadcastRow(usize),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Log => "log",
            OpKind::XLogX => "xlogx",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::BroadcastRow(_) => "broadcast_row",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Origin {
    /// Differentiable input.
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    Op(OpKind, NodeId, Option<NodeId>),
}

#[derive(Clone, Debug)]
struct Node {
    origin: Origin,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Eager reverse-mode tape. Nodes are appended in topological order; values are
/// computed on insertion.
///
/// Gradients accumulate across [`Graph::backward`] calls until
/// [`Graph::zero_grad`] is called. Constants and nodes that depend only on
/// constants are never differentiated and report a zero gradient.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Graph { nodes: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Origin::Leaf, value, true)
    }

    /// Adds an input that is treated as fixed (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Origin::Constant, value, false)
    }

    /// Copies the current value of `id` into a new constant node, cutting the
    /// gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    fn push(&mut self, origin: Origin, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { origin, value, grad: None, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        !matches!(self.nodes[id.0].origin, Origin::Op(..))
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        match self.nodes[id.0].origin {
            Origin::Op(_, a, b) => std::iter::once(a).chain(b).collect(),
            _ => Vec::new(),
        }
    }

    pub fn op_kind(&self, id: NodeId) -> Option<OpKind> {
        match self.nodes[id.0].origin {
            Origin::Op(k, ..) => Some(k),
            _ => None,
        }
    }

    /// Accumulated gradient of the last backward root(s) with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records `kind` applied to `parents` and returns the new node.
    pub fn apply(&mut self, kind: OpKind, parents: &[NodeId]) -> Result<NodeId> {
        if parents.len() != kind.arity() {
            return Err(Error::invalid(format!(
                "{} takes {} parent(s), got {}",
                kind.name(),
                kind.arity(),
                parents.len()
            )));
        }
        for p in parents {
            if p.0 >= self.nodes.len() {
                return Err(Error::invalid(format!("{}: unknown node {}", kind.name(), p.0)));
            }
        }
        let a = parents[0];
        let b = parents.get(1).copied();
        let value = self.forward(kind, a, b)?;
        let requires_grad =
            self.nodes[a.0].requires_grad || b.is_some_and(|b| self.nodes[b.0].requires_grad);
        Ok(self.push(Origin::Op(kind, a, b), value, requires_grad))
    }

    fn forward(&self, kind: OpKind, a: NodeId, b: Option<NodeId>) -> Result<Tensor> {
        let x = &self.nodes[a.0].value;
        let binary = |op: &'static str| -> Result<&Tensor> {
            let y = &self.nodes[b.expect("binary op").0].value;
            if x.shape() != y.shape() {
                return Err(Error::ShapeMismatch {
                    op,
                    left: x.shape().to_vec(),
                    right: y.shape().to_vec(),
                });
            }
            Ok(y)
        };
        let out = match kind {
            OpKind::MatMul => {
                let y = &self.nodes[b.expect("binary op").0].value;
                let (xs, ys) = (x.shape(), y.shape());
                if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        left: xs.to_vec(),
                        right: ys.to_vec(),
                    });
                }
                let (m, k, n) = (xs[0], xs[1], ys[1]);
                let mut out = vec![0.0; m * n];
                tensor::matmul_acc(x.data(), y.data(), &mut out, m, k, n);
                Tensor::from_parts(vec![m, n], out)
            }
            OpKind::Add => zip(x, binary("add")?, |p, q| p + q),
            OpKind::Sub => zip(x, binary("sub")?, |p, q| p - q),
            OpKind::Mul => zip(x, binary("mul")?, |p, q| p * q),
            OpKind::Scale(c) => x.map(|v| c * v),
            OpKind::Sigmoid => x.map(sigmoid),
            OpKind::Tanh => x.map(f64::tanh),
            OpKind::Relu => x.map(|v| v.max(0.0)),
            OpKind::Softmax | OpKind::LogSoftmax => {
                check_rowwise(x, kind.name())?;
                let (rows, cols) = x.dims2();
                let mut out = x.data().to_vec();
                for r in 0..rows {
                    let row = &mut out[r * cols..(r + 1) * cols];
                    if kind == OpKind::Softmax {
                        softmax_in_place(row);
                    } else {
                        log_softmax_in_place(row);
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
            OpKind::Log => x.map(f64::ln),
            OpKind::XLogX => x.map(xlogx),
            OpKind::Square => x.map(|v| v * v),
            OpKind::Sum => Tensor::scalar(x.sum()),
            OpKind::Mean => Tensor::scalar(x.sum() / x.len() as f64),
            OpKind::BroadcastRow(rows) => {
                let s = x.shape();
                let n = match s {
                    [n] | [1, n] => *n,
                    _ => {
                        return Err(Error::ShapeMismatch {
                            op: "broadcast_row",
                            left: s.to_vec(),
                            right: vec![rows],
                        })
                    }
                };
                if rows == 0 {
                    return Err(Error::Shape("broadcast_row to zero rows".into()));
                }
                let mut out = Vec::with_capacity(rows * n);
                for _ in 0..rows {
                    out.extend_from_slice(x.data());
                }
                Tensor::from_parts(vec![rows, n], out)
            }
        };
        Ok(out)
    }

    /// Back-propagates from a scalar `root`, adding `∂root/∂node` into every
    /// differentiable node's gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut upstream: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        upstream[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = upstream[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Origin::Op(kind, a, b) = node.origin {
                self.propagate(kind, a, b, idx, &g, &mut upstream);
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(s, v)| *s += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        kind: OpKind,
        a: NodeId,
        b: Option<NodeId>,
        out_idx: usize,
        g: &[f64],
        upstream: &mut [Option<Vec<f64>>],
    ) {
        let y = self.nodes[out_idx].value.data();
        let xa = &self.nodes[a.0];
        let need_a = xa.requires_grad;
        let need_b = b.is_some_and(|b| self.nodes[b.0].requires_grad);

        match kind {
            OpKind::MatMul => {
                let b = b.expect("binary op");
                let xb = &self.nodes[b.0].value;
                let (m, k) = (xa.value.shape()[0], xa.value.shape()[1]);
                let n = xb.shape()[1];
                if need_a {
                    let da = slot(upstream, a, m * k);
                    tensor::matmul_bt_acc(g, xb.data(), da, m, k, n);
                }
                if need_b {
                    let db = slot(upstream, b, k * n);
                    tensor::matmul_at_acc(xa.value.data(), g, db, m, k, n);
                }
            }
            OpKind::Add | OpKind::Sub => {
                if need_a {
                    add_into(slot(upstream, a, g.len()), g, 1.0);
                }
                if need_b {
                    let sign = if kind == OpKind::Add { 1.0 } else { -1.0 };
                    add_into(slot(upstream, b.expect("binary op"), g.len()), g, sign);
                }
            }
            OpKind::Mul => {
                let b = b.expect("binary op");
                let vb = self.nodes[b.0].value.data();
                let va = xa.value.data();
                if need_a {
                    let da = slot(upstream, a, g.len());
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(vb) {
                        *d += gi * bi;
                    }
                }
                if need_b {
                    let db = slot(upstream, b, g.len());
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(va) {
                        *d += gi * ai;
                    }
                }
            }
            _ if !need_a => {}
            OpKind::Scale(c) => add_into(slot(upstream, a, g.len()), g, c),
            OpKind::Sigmoid => {
                let da = slot(upstream, a, g.len());
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            OpKind::Tanh => {
                let da = slot(upstream, a, g.len());
                for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            OpKind::Relu => {
                let x = xa.value.data();
                let da = slot(upstream, a, g.len());
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            OpKind::Softmax => {
                let (rows, cols) = xa.value.dims2();
                let da = slot(upstream, a, g.len());
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(p, q)| p * q).sum();
                    for j in s {
                        da[j] += y[j] * (g[j] - dot);
                    }
                }
            }
            OpKind::LogSoftmax => {
                let (rows, cols) = xa.value.dims2();
                let da = slot(upstream, a, g.len());
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let total: f64 = g[s.clone()].iter().sum();
                    for j in s {
                        da[j] += g[j] - y[j].exp() * total;
                    }
                }
            }
            OpKind::Log => {
                let x = xa.value.data();
                let da = slot(upstream, a, g.len());
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gi / xi;
                }
            }
            OpKind::XLogX => {
                let x = xa.value.data();
                let da = slot(upstream, a, g.len());
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    // the derivative diverges at 0; the subgradient 0 keeps the tape finite
                    if *xi > 0.0 {
                        *d += gi * (xi.ln() + 1.0);
                    }
                }
            }
            OpKind::Square => {
                let x = xa.value.data();
                let da = slot(upstream, a, g.len());
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    *d += 2.0 * gi * xi;
                }
            }
            OpKind::Sum | OpKind::Mean => {
                let n = xa.value.len();
                let scale = if kind == OpKind::Sum { g[0] } else { g[0] / n as f64 };
                slot(upstream, a, n).iter_mut().for_each(|d| *d += scale);
            }
            OpKind::BroadcastRow(rows) => {
                let n = xa.value.len();
                let da = slot(upstream, a, n);
                for r in 0..rows {
                    add_into(da, &g[r * n..(r + 1) * n], 1.0);
                }
            }
        }
    }

    // Convenience wrappers. Each is `apply` with the matching kind.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::LogSoftmax, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn xlogx(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::XLogX, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn broadcast_row(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        self.apply(OpKind::BroadcastRow(rows), &[a])
    }

    /// `x + bias` with `bias` of shape `[n]` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let rows = self.value(x).dims2().0;
        let b = self.broadcast_row(bias, rows)?;
        self.add(x, b)
    }
}

fn slot<'a>(upstream: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut [f64] {
    upstream[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn zip(x: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn check_rowwise(x: &Tensor, op: &'static str) -> Result<()> {
    if x.shape().len() > 2 {
        return Err(Error::ShapeMismatch { op, left: x.shape().to_vec(), right: vec![] });
    }
    Ok(())
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn xlogx(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v * v.ln()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}
