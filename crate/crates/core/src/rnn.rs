//! Simple-RNN and LSTM cells with a time-invariant dropout mask on the
//! recurrent connection.
//!
//! The recurrent input `h_{t-1}` is replaced by `d(h_{t-1}, ε) = h_{t-1} ⊙ ε / (1 − p)`
//! before it meets the hidden-to-hidden weights, and the same mask node `ε`
//! is consumed at every unrolled step. Because the mask is a single node on
//! the tape, its gradient collects the contribution of every step in one
//! backward pass.
//!
//! Masks may be given per sequence (`[H]`, shared by the whole batch) or per
//! example (`[B, H]`).

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Rnn,
    Lstm,
}

impl CellKind {
    pub fn num_gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Lstm => 4,
        }
    }

    fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Rnn => &["rnn.h"],
            CellKind::Lstm => &["lstm.i", "lstm.f", "lstm.g", "lstm.o"],
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::invalid(format!("unknown cell kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
        })
    }
}

/// Input-to-hidden `w` `[D_in × H]`, hidden-to-hidden `u` `[H × H]` and bias `b` `[H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

/// Weights of a one-layer recurrent classifier.
///
/// LSTM gates are stored in the order input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnParams {
    pub kind: CellKind,
    pub gates: Vec<GateParams>,
    /// Hidden-to-output `[H × M]`.
    pub w_out: Tensor,
    /// `[M]`.
    pub b_out: Tensor,
}

impl RnnParams {
    /// Uniform `±1/√H` initialisation. LSTM forget-gate biases start at 1.
    pub fn init<R: Rng + ?Sized>(
        kind: CellKind,
        input_dim: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |shape: Vec<usize>| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_parts(shape, data)
        };
        let mut gates = Vec::with_capacity(kind.num_gates());
        for gi in 0..kind.num_gates() {
            let w = uniform(vec![input_dim, hidden]);
            let u = uniform(vec![hidden, hidden]);
            let b = if kind == CellKind::Lstm && gi == 1 {
                Tensor::filled(vec![hidden], 1.0)
            } else {
                Tensor::zeros(vec![hidden])
            };
            gates.push(GateParams { w, u, b });
        }
        let w_out = uniform(vec![hidden, output]);
        let b_out = Tensor::zeros(vec![output]);
        Ok(RnnParams { kind, gates, w_out, b_out })
    }

    pub fn zeros(kind: CellKind, input_dim: usize, hidden: usize, output: usize) -> Self {
        let gates = (0..kind.num_gates())
            .map(|_| GateParams {
                w: Tensor::zeros(vec![input_dim, hidden]),
                u: Tensor::zeros(vec![hidden, hidden]),
                b: Tensor::zeros(vec![hidden]),
            })
            .collect();
        RnnParams {
            kind,
            gates,
            w_out: Tensor::zeros(vec![hidden, output]),
            b_out: Tensor::zeros(vec![output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.gates[0].w.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.gates[0].u.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.b_out.len()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameters in canonical order: per gate `w, u, b`, then `w_out, b_out`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(3 * self.gates.len() + 2);
        for g in &self.gates {
            out.extend([&g.w, &g.u, &g.b]);
        }
        out.push(&self.w_out);
        out.push(&self.b_out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(3 * self.gates.len() + 2);
        for g in &mut self.gates {
            out.push(&mut g.w);
            out.push(&mut g.u);
            out.push(&mut g.b);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    /// Names matching [`RnnParams::tensors`], used by checkpoints and error messages.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for gate in self.kind.gate_names() {
            for part in ["w", "u", "b"] {
                out.push(format!("{gate}.{part}"));
            }
        }
        out.push("out.w".into());
        out.push("out.b".into());
        out
    }

    /// Rebuilds parameters from `(name, tensor)` pairs; the cell kind is
    /// inferred from the gate names.
    pub fn from_named(mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let kind = if named.iter().any(|(n, _)| n.starts_with("lstm.")) {
            CellKind::Lstm
        } else {
            CellKind::Rnn
        };
        let mut take = |name: &str| -> Result<Tensor> {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))?;
            Ok(named.swap_remove(pos).1)
        };
        let mut gates = Vec::new();
        for gate in kind.gate_names() {
            gates.push(GateParams {
                w: take(&format!("{gate}.w"))?,
                u: take(&format!("{gate}.u"))?,
                b: take(&format!("{gate}.b"))?,
            });
        }
        let w_out = take("out.w")?;
        let b_out = take("out.b")?;
        if let Some((extra, _)) = named.first() {
            return Err(Error::Format(format!("unexpected parameter {extra:?}")));
        }
        let params = RnnParams { kind, gates, w_out, b_out };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gates.len() != self.kind.num_gates() {
            return Err(Error::Shape(format!(
                "{} cell needs {} gates, found {}",
                self.kind,
                self.kind.num_gates(),
                self.gates.len()
            )));
        }
        let d = self.gates[0].w.shape().first().copied().unwrap_or(0);
        let h = self.gates[0].u.shape().first().copied().unwrap_or(0);
        let m = self.b_out.len();
        let check = |name: &str, t: &Tensor, want: &[usize]| -> Result<()> {
            if t.shape() != want {
                return Err(Error::Shape(format!("{name}: expected {want:?}, got {:?}", t.shape())));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
            Ok(())
        };
        for (gi, g) in self.gates.iter().enumerate() {
            check(&format!("gate {gi} w"), &g.w, &[d, h])?;
            check(&format!("gate {gi} u"), &g.u, &[h, h])?;
            check(&format!("gate {gi} b"), &g.b, &[h])?;
        }
        check("out.w", &self.w_out, &[h, m])?;
        check("out.b", &self.b_out, &[m])?;
        if m == 0 {
            return Err(Error::Shape("output dimension must be at least 1".into()));
        }
        Ok(())
    }

    /// Registers every parameter on `g`, as leaves when `trainable`, else as constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamNodes {
        let mut add = |t: &Tensor| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        let gates = self
            .gates
            .iter()
            .map(|p| GateNodes { w: add(&p.w), u: add(&p.u), b: add(&p.b) })
            .collect();
        let w_out = add(&self.w_out);
        let b_out = add(&self.b_out);
        ParamNodes { kind: self.kind, hidden: self.hidden(), gates, w_out, b_out }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateNodes {
    pub w: NodeId,
    pub u: NodeId,
    pub b: NodeId,
}

/// Tape nodes holding one registered copy of [`RnnParams`].
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub kind: CellKind,
    pub hidden: usize,
    pub gates: Vec<GateNodes>,
    pub w_out: NodeId,
    pub b_out: NodeId,
}

impl ParamNodes {
    /// Node ids in the same order as [`RnnParams::tensors`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(3 * self.gates.len() + 2);
        for g in &self.gates {
            out.extend([g.w, g.u, g.b]);
        }
        out.push(self.w_out);
        out.push(self.b_out);
        out
    }

    /// Reads the accumulated gradients in [`RnnParams::tensors`] order.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.ids().into_iter().map(|id| g.grad(id)).collect()
    }
}

/// Which steps carry supervision.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One class label per sequence, read at the last step.
    Final(Vec<usize>),
    /// `labels[b][t]`: one label per sequence and step.
    PerStep(Vec<Vec<usize>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    FinalStep,
    PerStep,
}

/// `T` input slices of shape `[B × D_in]` with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub inputs: Vec<Tensor>,
    pub targets: Targets,
}

impl SequenceBatch {
    pub fn new(inputs: Vec<Tensor>, targets: Targets) -> Result<Self> {
        let batch = SequenceBatch { inputs, targets };
        batch.validate(None)?;
        Ok(batch)
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.dims2().0)
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.dims2().1)
    }

    pub fn task_kind(&self) -> TaskKind {
        match self.targets {
            Targets::Final(_) => TaskKind::FinalStep,
            Targets::PerStep(_) => TaskKind::PerStep,
        }
    }

    /// Checks shapes, and label ranges when `classes` is given.
    pub fn validate(&self, classes: Option<usize>) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        let (b, d) = self.inputs[0].dims2();
        for (t, x) in self.inputs.iter().enumerate() {
            if x.shape() != [b, d] {
                return Err(Error::Shape(format!(
                    "input step {t}: expected [{b}, {d}], got {:?}",
                    x.shape()
                )));
            }
        }
        let in_range = |l: usize| classes.is_none_or(|m| l < m);
        match &self.targets {
            Targets::Final(labels) => {
                if labels.len() != b {
                    return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
                }
                if let Some(l) = labels.iter().find(|&&l| !in_range(l)) {
                    return Err(Error::invalid(format!("label {l} out of range")));
                }
            }
            Targets::PerStep(rows) => {
                if rows.len() != b || rows.iter().any(|r| r.len() != self.inputs.len()) {
                    return Err(Error::Shape("per-step labels must be [B × T]".into()));
                }
                if rows.iter().flatten().any(|&l| !in_range(l)) {
                    return Err(Error::invalid("per-step label out of range"));
                }
            }
        }
        Ok(())
    }

    /// Sub-batch made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> SequenceBatch {
        let inputs = self
            .inputs
            .iter()
            .map(|x| {
                let d = x.dims2().1;
                let mut data = Vec::with_capacity(rows.len() * d);
                for &r in rows {
                    data.extend_from_slice(x.row(r));
                }
                Tensor::from_parts(vec![rows.len(), d], data)
            })
            .collect();
        let targets = match &self.targets {
            Targets::Final(l) => Targets::Final(rows.iter().map(|&r| l[r]).collect()),
            Targets::PerStep(l) => Targets::PerStep(rows.iter().map(|&r| l[r].clone()).collect()),
        };
        SequenceBatch { inputs, targets }
    }

    /// Repeats row `row` `copies` times.
    pub fn replicate(&self, row: usize, copies: usize) -> SequenceBatch {
        self.select(&vec![row; copies])
    }
}

/// Result of unrolling a model over a batch. Ids refer to the graph the
/// sequence was unrolled on.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub hidden: Vec<NodeId>,
    pub cells: Vec<NodeId>,
    pub logits: Vec<NodeId>,
    /// Softmax outputs, `[B × M]` per step.
    pub predictions: Vec<NodeId>,
    pub mask: NodeId,
}

impl ForwardTrace {
    pub fn steps(&self) -> usize {
        self.predictions.len()
    }

    pub fn prediction_values(&self, g: &Graph) -> Vec<Tensor> {
        self.predictions.iter().map(|&id| g.value(id).clone()).collect()
    }
}

/// `1 / (1 − p)`, the inverted-dropout scale.
pub fn keep_scale(p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    Ok(1.0 / (1.0 - p))
}

/// `d(h, ε) = h ⊙ ε / (1 − p)`. `mask` is `[H]` or `[B × H]`.
pub fn dropout(g: &mut Graph, h: NodeId, mask: NodeId, p: f64) -> Result<NodeId> {
    let scale = keep_scale(p)?;
    let m = if g.shape(mask).len() == 1 && g.shape(h).len() == 2 {
        let rows = g.shape(h)[0];
        g.broadcast_row(mask, rows)?
    } else {
        mask
    };
    let dropped = g.mul(h, m)?;
    if p == 0.0 {
        Ok(dropped)
    } else {
        g.scale(dropped, scale)
    }
}

fn gate_preact(
    g: &mut Graph,
    x: NodeId,
    h_dropped: NodeId,
    gate: &GateNodes,
) -> Result<NodeId> {
    let xw = g.matmul(x, gate.w)?;
    let hu = g.matmul(h_dropped, gate.u)?;
    let s = g.add(xw, hu)?;
    g.add_row(s, gate.b)
}

fn check_mask_shape(g: &Graph, h_prev: NodeId, mask: NodeId, hidden: usize) -> Result<()> {
    let (b, h) = g.value(h_prev).dims2();
    let ok = match g.shape(mask) {
        [n] => *n == hidden,
        [r, n] => *n == hidden && *r == b,
        _ => false,
    };
    if h != hidden || !ok {
        return Err(Error::ShapeMismatch {
            op: "recurrent dropout",
            left: g.shape(h_prev).to_vec(),
            right: g.shape(mask).to_vec(),
        });
    }
    Ok(())
}

/// One simple-RNN step: `h_t = tanh(x_t W_h + d(h_{t−1}, ε) U_h + b_h)`.
pub fn rnn_step(
    g: &mut Graph,
    x: NodeId,
    h_prev: NodeId,
    mask: NodeId,
    params: &ParamNodes,
    p: f64,
) -> Result<NodeId> {
    if params.kind != CellKind::Rnn {
        return Err(Error::invalid("rnn_step needs simple-RNN parameters"));
    }
    check_mask_shape(g, h_prev, mask, params.hidden)?;
    let hd = dropout(g, h_prev, mask, p)?;
    let z = gate_preact(g, x, hd, &params.gates[0])?;
    g.tanh(z)
}

/// One LSTM step. The dropped recurrent state feeds all four gates.
pub fn lstm_step(
    g: &mut Graph,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    mask: NodeId,
    params: &ParamNodes,
    p: f64,
) -> Result<(NodeId, NodeId)> {
    if params.kind != CellKind::Lstm {
        return Err(Error::invalid("lstm_step needs LSTM parameters"));
    }
    check_mask_shape(g, h_prev, mask, params.hidden)?;
    let hd = dropout(g, h_prev, mask, p)?;
    let zi = gate_preact(g, x, hd, &params.gates[0])?;
    let zf = gate_preact(g, x, hd, &params.gates[1])?;
    let zg = gate_preact(g, x, hd, &params.gates[2])?;
    let zo = gate_preact(g, x, hd, &params.gates[3])?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let cand = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;
    let fc = g.mul(f, c_prev)?;
    let ig = g.mul(i, cand)?;
    let c = g.add(fc, ig)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Unrolls the model over `batch` with `h_0 = c_0 = 0`, consuming the same
/// `mask` node at every step, and emits `softmax(h_t W_out + b_out)` at every step.
pub fn forward_sequence(
    g: &mut Graph,
    params: &ParamNodes,
    batch: &SequenceBatch,
    mask: NodeId,
    p: f64,
) -> Result<ForwardTrace> {
    if batch.inputs.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    keep_scale(p)?;
    let b = batch.batch_size();
    let hidden = params.hidden;
    let mut h = g.constant(Tensor::zeros(vec![b, hidden]));
    let mut c = g.constant(Tensor::zeros(vec![b, hidden]));
    let steps = batch.steps();
    let mut trace = ForwardTrace {
        hidden: Vec::with_capacity(steps),
        cells: Vec::new(),
        logits: Vec::with_capacity(steps),
        predictions: Vec::with_capacity(steps),
        mask,
    };
    for x_t in &batch.inputs {
        let x = g.constant(x_t.clone());
        match params.kind {
            CellKind::Rnn => h = rnn_step(g, x, h, mask, params, p)?,
            CellKind::Lstm => {
                (h, c) = lstm_step(g, x, h, c, mask, params, p)?;
                trace.cells.push(c);
            }
        }
        let out = g.matmul(h, params.w_out)?;
        let logits = g.add_row(out, params.b_out)?;
        let pred = g.softmax(logits)?;
        trace.hidden.push(h);
        trace.logits.push(logits);
        trace.predictions.push(pred);
    }
    Ok(trace)
}

/// Forward pass without gradient bookkeeping; returns per-step predictions.
/// `mask` is `[H]` or `[B × H]`.
pub fn predict(params: &RnnParams, batch: &SequenceBatch, mask: &Tensor, p: f64) -> Result<Vec<Tensor>> {
    let mut g = Graph::with_capacity(batch.steps() * 32);
    let pn = params.register(&mut g, false);
    let m = g.constant(mask.clone());
    let trace = forward_sequence(&mut g, &pn, batch, m, p)?;
    Ok(trace.prediction_values(&g))
}

/// Predictions of the expected-mask network (`ε = 1`, no scaling).
pub fn predict_full(params: &RnnParams, batch: &SequenceBatch) -> Result<Vec<Tensor>> {
    predict(params, batch, &Tensor::filled(vec![params.hidden()], 1.0), 0.0)
}
