//! Training loop: task loss plus an optional dropout-consistency regularizer,
//! global-norm clipping, and RMSProp or Adam updates.
//!
//! Each batch first fixes its masks ([`plan_masks`], the only place that
//! consumes randomness), then records the loss on a fresh tape
//! ([`batch_loss`]). The adversarial search runs on the current weights and is
//! not differentiated through; the supervising trace is detached from the
//! regularizer so gradient reaches the weights through the perturbed trace
//! (and through the task loss).

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use optim::{clip_gradients, optimizer_step, LrSchedule, Optimizer, OptimizerState, EPS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::masks::{self, AdvConfig, BaseMaskPolicy, DropoutMask, InitPolicy};
use crate::regularizers::{distance_against, sequence_distance, DistanceMetric, LambdaSchedule, Reduction};
use crate::rnn::{self, ForwardTrace, ParamNodes, RnnParams, SequenceBatch, Targets};
use crate::tensor::Tensor;

/// Which consistency term is added to the task loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizerKind {
    /// Task loss only; with `dropout_p > 0` this is plain recurrent dropout.
    None,
    /// Full network vs. a random mask.
    El,
    /// Two random masks.
    Fd,
    /// Base mask vs. the searched adversarial mask.
    Add,
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RegularizerKind::None),
            "el" => Ok(RegularizerKind::El),
            "fd" => Ok(RegularizerKind::Fd),
            "add" => Ok(RegularizerKind::Add),
            other => Err(Error::invalid(format!("unknown regularizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegularizerKind::None => "none",
            RegularizerKind::El => "el",
            RegularizerKind::Fd => "fd",
            RegularizerKind::Add => "add",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub regularizer: RegularizerKind,
    /// Coefficient of the regularizer. Zero makes the run identical to `None`.
    pub reg_weight: f64,
    pub dropout_p: f64,
    pub adv: AdvConfig,
    pub base_policy: BaseMaskPolicy,
    pub lambda: LambdaSchedule,
    pub metric: DistanceMetric,
    /// Let EL/FD gradients flow through both traces.
    pub symmetric: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::RmsProp { decay: 0.5 },
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            clip_norm: 1.0,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            regularizer: RegularizerKind::None,
            reg_weight: 1.0,
            dropout_p: 0.0,
            adv: AdvConfig { delta: 0.03, stages: 2, init: InitPolicy::SingleRandomFlip },
            base_policy: BaseMaskPolicy::Expected,
            lambda: LambdaSchedule::FinalStep,
            metric: DistanceMetric::JensenShannon,
            symmetric: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.reg_weight >= 0.0) || !self.reg_weight.is_finite() {
            return Err(Error::invalid("regularizer weight must be finite and nonnegative"));
        }
        rnn::keep_scale(self.dropout_p)?;
        self.adv.validate()?;
        Ok(())
    }

    /// The regularizer actually applied (`None` when its weight is zero).
    pub fn effective_regularizer(&self) -> RegularizerKind {
        if self.reg_weight == 0.0 {
            RegularizerKind::None
        } else {
            self.regularizer
        }
    }
}

/// Masks chosen for one batch, one per row.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskPlan {
    Full,
    Dropout(Vec<DropoutMask>),
    El(Vec<DropoutMask>),
    Fd(Vec<DropoutMask>, Vec<DropoutMask>),
    Adversarial { base: Vec<DropoutMask>, adversarial: Vec<DropoutMask> },
}

fn sampled(p: f64, hidden: usize, rows: usize, rng: &mut ChaCha8Rng) -> Result<Vec<DropoutMask>> {
    (0..rows).map(|_| masks::sample_mask(p, hidden, rng)).collect()
}

/// Draws the masks for `batch` (and runs the adversarial search when needed).
pub fn plan_masks(
    params: &RnnParams,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MaskPlan> {
    let (h, b, p) = (params.hidden(), batch.batch_size(), cfg.dropout_p);
    Ok(match cfg.effective_regularizer() {
        RegularizerKind::None if p == 0.0 => MaskPlan::Full,
        RegularizerKind::None => MaskPlan::Dropout(sampled(p, h, b, rng)?),
        RegularizerKind::El => MaskPlan::El(sampled(p, h, b, rng)?),
        RegularizerKind::Fd => MaskPlan::Fd(sampled(p, h, b, rng)?, sampled(p, h, b, rng)?),
        RegularizerKind::Add => {
            let base = masks::base_masks(cfg.base_policy, p, h, b, rng)?;
            let adversarial = masks::adversarial_mask(params, batch, &base, &cfg.adv, &cfg.lambda, cfg.metric, rng)?;
            MaskPlan::Adversarial { base, adversarial }
        }
    })
}

fn trace_with(g: &mut Graph, pn: &ParamNodes, batch: &SequenceBatch, ms: &[DropoutMask]) -> Result<ForwardTrace> {
    let (m, p) = masks::stack(ms)?;
    let m = g.constant(m);
    rnn::forward_sequence(g, pn, batch, m, p)
}

fn full_trace(g: &mut Graph, pn: &ParamNodes, batch: &SequenceBatch) -> Result<ForwardTrace> {
    let m = g.constant(Tensor::filled(vec![pn.hidden], 1.0));
    rnn::forward_sequence(g, pn, batch, m, 0.0)
}

fn one_hot(labels: impl Iterator<Item = usize>, rows: usize, classes: usize) -> Tensor {
    let mut data = vec![0.0; rows * classes];
    for (r, l) in labels.enumerate() {
        data[r * classes + l] = 1.0;
    }
    Tensor::matrix(rows, classes, data).expect("shape")
}

/// Mean negative log-likelihood of the targets: at the last step for
/// final-step tasks, averaged over all steps for per-step tasks.
pub fn cross_entropy(g: &mut Graph, trace: &ForwardTrace, targets: &Targets) -> Result<NodeId> {
    let last = *trace.logits.last().ok_or_else(|| Error::invalid("empty trace"))?;
    let (rows, classes) = g.value(last).dims2();
    let term = |g: &mut Graph, logits: NodeId, oh: Tensor| -> Result<NodeId> {
        let ls = g.log_softmax(logits)?;
        let oh = g.constant(oh);
        let picked = g.mul(ls, oh)?;
        g.sum(picked)
    };
    match targets {
        Targets::Final(labels) => {
            let s = term(g, last, one_hot(labels.iter().copied(), rows, classes))?;
            g.scale(s, -1.0 / rows as f64)
        }
        Targets::PerStep(labels) => {
            let mut total: Option<NodeId> = None;
            for (t, &logits) in trace.logits.iter().enumerate() {
                let s = term(g, logits, one_hot(labels.iter().map(|r| r[t]), rows, classes))?;
                total = Some(match total {
                    Some(acc) => g.add(acc, s)?,
                    None => s,
                });
            }
            let steps = trace.logits.len() as f64;
            g.scale(total.expect("nonempty"), -1.0 / (rows as f64 * steps))
        }
    }
}

/// Nodes of one batch objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub task: NodeId,
    pub reg: Option<NodeId>,
}

/// Records `task + weight · regularizer` for a fixed mask plan.
pub fn batch_loss(
    g: &mut Graph,
    pn: &ParamNodes,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    plan: &MaskPlan,
) -> Result<LossNodes> {
    let (supervised, reg) = match plan {
        MaskPlan::Full => (full_trace(g, pn, batch)?, None),
        MaskPlan::Dropout(ms) => (trace_with(g, pn, batch, ms)?, None),
        MaskPlan::El(ms) => {
            let full = full_trace(g, pn, batch)?;
            let masked = trace_with(g, pn, batch, ms)?;
            let r = sequence_distance(g, &full, &masked, &cfg.lambda, cfg.metric, Reduction::Mean, cfg.symmetric)?;
            (masked, Some(r))
        }
        MaskPlan::Fd(a, b) => {
            let ta = trace_with(g, pn, batch, a)?;
            let tb = trace_with(g, pn, batch, b)?;
            let r = sequence_distance(g, &ta, &tb, &cfg.lambda, cfg.metric, Reduction::Mean, cfg.symmetric)?;
            (ta, Some(r))
        }
        MaskPlan::Adversarial { base, adversarial } => {
            let tb = trace_with(g, pn, batch, base)?;
            let ta = trace_with(g, pn, batch, adversarial)?;
            let refs: Vec<NodeId> = tb.predictions.iter().map(|&id| g.detach(id)).collect();
            let r = distance_against(g, &refs, &ta.predictions, &cfg.lambda, cfg.metric, Reduction::Mean)?;
            (tb, Some(r))
        }
    };
    let task = cross_entropy(g, &supervised, &batch.targets)?;
    let total = match reg {
        Some(r) => {
            let w = g.scale(r, cfg.reg_weight)?;
            g.add(task, w)?
        }
        None => task,
    };
    Ok(LossNodes { total, task, reg })
}

/// Per-epoch record, one CSV row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean task loss over batches.
    pub train_loss: f64,
    /// Mean regularizer value over batches (0 without one).
    pub reg_value: f64,
    pub val_error: f64,
    pub test_error: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,reg_value,val_error,test_error";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.reg_value, self.val_error, self.test_error
        )
    }
}

/// Everything that evolves during a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: RnnParams,
    pub opt: OptimizerState,
    /// Optimiser steps taken so far.
    pub step: u64,
    pub epoch: usize,
    /// Orders examples.
    pub shuffle_rng: ChaCha8Rng,
    /// Draws masks and search starting points.
    pub noise_rng: ChaCha8Rng,
    pub history: Vec<EpochMetrics>,
    /// Largest distance between a searched mask and its base seen so far.
    pub max_adv_hamming: usize,
}

impl TrainState {
    pub fn new(params: RnnParams, seed: u64) -> Self {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(0);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(1);
        TrainState {
            opt: OptimizerState::new(&params),
            params,
            step: 0,
            epoch: 0,
            shuffle_rng,
            noise_rng,
            history: Vec::new(),
            max_adv_hamming: 0,
        }
    }
}

/// Aggregates of one pass over the training set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub reg_value: f64,
}

/// One shuffled pass over `data` with an update per batch.
pub fn train_epoch(state: &mut TrainState, data: &SequenceDataset, cfg: &TrainConfig) -> Result<EpochStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.shuffle_rng);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let budget = cfg.adv.budget(state.params.hidden());
    let (mut task_sum, mut reg_sum) = (0.0, 0.0);
    let mut batches = 0usize;

    for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
        let batch = data.batch(idx);
        let plan = plan_masks(&state.params, &batch, cfg, &mut state.noise_rng)?;
        if let MaskPlan::Adversarial { base, adversarial } = &plan {
            for (b, a) in base.iter().zip(adversarial) {
                let d = a.hamming(b);
                if d > budget {
                    return Err(Error::invalid(format!("batch {bi}: searched mask differs in {d} > {budget} units")));
                }
                state.max_adv_hamming = state.max_adv_hamming.max(d);
            }
        }
        let mut g = Graph::with_capacity(batch.steps() * 90);
        let pn = state.params.register(&mut g, true);
        let loss = batch_loss(&mut g, &pn, &batch, cfg, &plan)?;
        let task = g.value(loss.task).item();
        let reg = loss.reg.map_or(0.0, |r| g.value(r).item());
        let total = g.value(loss.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {} batch {bi}: task loss {task}, regularizer {reg}",
                state.epoch + 1
            )));
        }
        g.backward(loss.total)?;
        let mut grads = pn.grads(&g);
        clip_gradients(&mut grads, cfg.clip_norm)?;
        let lr = cfg.lr_schedule.lr(cfg.lr, state.step, steps_per_epoch, cfg.epochs);
        optimizer_step(&mut state.params, &mut state.opt, &grads, lr, &cfg.optimizer)?;
        state.step += 1;
        task_sum += task;
        reg_sum += reg;
        batches += 1;
    }
    state.epoch += 1;
    Ok(EpochStats { train_loss: task_sum / batches as f64, reg_value: reg_sum / batches as f64 })
}

/// Trains one epoch, evaluates, and appends the metrics to the history.
pub fn run_epoch(
    state: &mut TrainState,
    train: &SequenceDataset,
    val: &SequenceDataset,
    test: &SequenceDataset,
    cfg: &TrainConfig,
) -> Result<EpochMetrics> {
    let stats = train_epoch(state, train, cfg)?;
    let m = EpochMetrics {
        epoch: state.epoch,
        train_loss: stats.train_loss,
        reg_value: stats.reg_value,
        val_error: evaluate(&state.params, val)?,
        test_error: evaluate(&state.params, test)?,
    };
    state.history.push(m);
    Ok(m)
}

const EVAL_BATCH: usize = 256;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Counts (correct, total) predictions of one batch.
fn score(preds: &[Tensor], targets: &Targets) -> (usize, usize) {
    match targets {
        Targets::Final(labels) => {
            let last = preds.last().expect("nonempty");
            let ok = labels.iter().enumerate().filter(|&(r, &l)| argmax(last.row(r)) == l).count();
            (ok, labels.len())
        }
        Targets::PerStep(labels) => {
            let mut ok = 0;
            for (t, p) in preds.iter().enumerate() {
                ok += labels.iter().enumerate().filter(|&(r, l)| argmax(p.row(r)) == l[t]).count();
            }
            (ok, labels.len() * preds.len())
        }
    }
}

/// Error rate of the expected-mask network. NaN on an empty set.
pub fn evaluate(params: &RnnParams, data: &SequenceDataset) -> Result<f64> {
    let acc = accuracy_under(params, data, |b| Ok(vec![DropoutMask::ones(params.hidden()); b.batch_size()]))?;
    Ok(1.0 - acc)
}

/// Accuracy when each batch is run under the masks `masks_for` returns.
pub fn accuracy_under(
    params: &RnnParams,
    data: &SequenceDataset,
    mut masks_for: impl FnMut(&SequenceBatch) -> Result<Vec<DropoutMask>>,
) -> Result<f64> {
    let (mut ok, mut total) = (0usize, 0usize);
    for batch in data.batches(EVAL_BATCH) {
        let ms = masks_for(&batch)?;
        let (m, p) = masks::stack(&ms)?;
        let preds = rnn::predict(params, &batch, &m, p)?;
        let (o, t) = score(&preds, &batch.targets);
        ok += o;
        total += t;
    }
    Ok(if total == 0 { f64::NAN } else { ok as f64 / total as f64 })
}

/// Mean per-target negative log-likelihood of the expected-mask network.
pub fn mean_nll(params: &RnnParams, data: &SequenceDataset) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for batch in data.batches(EVAL_BATCH) {
        let preds = rnn::predict_full(params, &batch)?;
        let nll = |p: &Tensor, r: usize, l: usize| -p.row(r)[l].max(f64::MIN_POSITIVE).ln();
        match &batch.targets {
            Targets::Final(labels) => {
                let last = preds.last().expect("nonempty");
                for (r, &l) in labels.iter().enumerate() {
                    sum += nll(last, r, l);
                    count += 1;
                }
            }
            Targets::PerStep(labels) => {
                for (t, p) in preds.iter().enumerate() {
                    for (r, l) in labels.iter().enumerate() {
                        sum += nll(p, r, l[t]);
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    Ok(sum / count as f64)
}

/// `exp` of [`mean_nll`].
pub fn perplexity(params: &RnnParams, data: &SequenceDataset) -> Result<f64> {
    Ok(mean_nll(params, data)?.exp())
}
