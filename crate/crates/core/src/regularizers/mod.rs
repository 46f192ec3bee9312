//! Output distances and the dropout-consistency regularizers built on them.
//!
//! Every regularizer here compares per-step predictions of two masked copies
//! of the same network, weighted by a [`LambdaSchedule`]:
//!
//! * expectation-linearization ([`el_regularizer`]): expected-mask network vs. a random mask;
//! * fraternal ([`fd_regularizer`]): two independent random masks;
//! * adversarial ([`add_regularizer`]): base mask vs. the budget-constrained worst mask.
//!
//! [`remark1_check`] and [`proposition1_check`] measure the variance
//! decomposition of the adversarial term and the ordering of the three regularizers.

mod estimators;
mod prop1;
mod remark1;

use crate::autodiff::{xlogx, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rnn::ForwardTrace;
use crate::tensor::Tensor;

pub use estimators::{add_regularizer, el_regularizer, fd_regularizer, paired_mask_distances, AdversarialEval, Estimate};
pub use prop1::{proposition1_check, sample_constrained_mask, Prop1Report, MAX_HIDDEN as PROP1_MAX_HIDDEN};
pub use remark1::{mask_seed, remark1_check, remark1_from_outputs, Remark1Report, TermEstimate, MIN_SAMPLES};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceMetric {
    SquaredL2,
    /// Jensen–Shannon divergence with natural logarithms.
    JensenShannon,
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "squared-l2" => Ok(DistanceMetric::SquaredL2),
            "js" | "jensen-shannon" => Ok(DistanceMetric::JensenShannon),
            other => Err(Error::invalid(format!("unknown distance metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistanceMetric::SquaredL2 => "l2",
            DistanceMetric::JensenShannon => "js",
        })
    }
}

/// Per-step weights `λ_1..λ_T`.
#[derive(Clone, Debug, PartialEq)]
pub enum LambdaSchedule {
    /// `λ_T = 1`, every other step 0.
    FinalStep,
    /// `λ_t = 1/T`.
    Uniform,
    Explicit(Vec<f64>),
}

impl LambdaSchedule {
    pub fn weights(&self, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::invalid("schedule over zero steps"));
        }
        let w = match self {
            LambdaSchedule::FinalStep => {
                let mut w = vec![0.0; steps];
                w[steps - 1] = 1.0;
                w
            }
            LambdaSchedule::Uniform => vec![1.0 / steps as f64; steps],
            LambdaSchedule::Explicit(w) => {
                if w.len() != steps {
                    return Err(Error::invalid(format!(
                        "lambda schedule has {} weights for {steps} steps",
                        w.len()
                    )));
                }
                if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(Error::invalid("lambda weights must be finite and nonnegative"));
                }
                if !w.iter().any(|&v| v > 0.0) {
                    return Err(Error::invalid("lambda schedule needs a positive weight"));
                }
                w.clone()
            }
        };
        Ok(w)
    }
}

impl std::str::FromStr for LambdaSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" | "final-step" => Ok(LambdaSchedule::FinalStep),
            "uniform" => Ok(LambdaSchedule::Uniform),
            other => {
                let w = other
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::invalid(format!("bad lambda schedule {other:?}")))?;
                let steps = w.len();
                let sched = LambdaSchedule::Explicit(w);
                sched.weights(steps)?;
                Ok(sched)
            }
        }
    }
}

impl std::fmt::Display for LambdaSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LambdaSchedule::FinalStep => f.write_str("final"),
            LambdaSchedule::Uniform => f.write_str("uniform"),
            LambdaSchedule::Explicit(w) => {
                let parts: Vec<String> = w.iter().map(|v| v.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

/// Distance between two output vectors.
pub fn distance(p: &[f64], q: &[f64], metric: DistanceMetric) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch { op: "distance", left: vec![p.len()], right: vec![q.len()] });
    }
    match metric {
        DistanceMetric::SquaredL2 => Ok(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()),
        DistanceMetric::JensenShannon => {
            if p.iter().chain(q).any(|&v| !(v >= 0.0)) {
                return Err(Error::invalid("Jensen-Shannon needs nonnegative entries"));
            }
            Ok(js_unchecked(p, q))
        }
    }
}

fn js_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        total += 0.5 * xlogx(a) + 0.5 * xlogx(b) - xlogx(m);
    }
    total.max(0.0)
}

/// Per-row `Σ_t λ_t D(a_t[row], b_t[row])` for two lists of `[B × M]` predictions.
pub fn sequence_distance_rows(
    a: &[Tensor],
    b: &[Tensor],
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("traces have {} and {} steps", a.len(), b.len())));
    }
    let weights = lambda.weights(a.len())?;
    let rows = a[0].dims2().0;
    let mut out = vec![0.0; rows];
    for ((pa, pb), &w) in a.iter().zip(b).zip(&weights) {
        if pa.shape() != pb.shape() {
            return Err(Error::ShapeMismatch {
                op: "sequence_distance",
                left: pa.shape().to_vec(),
                right: pb.shape().to_vec(),
            });
        }
        if w == 0.0 {
            continue;
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o += w * distance(pa.row(r), pb.row(r), metric)?;
        }
    }
    Ok(out)
}

/// How per-row distances are combined on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Sum over rows: the gradient with respect to a per-row mask is that row's own derivative.
    Sum,
    /// Mean over rows, as used in the training loss.
    Mean,
}

/// Records `D(p, q)` summed over all rows of two `[B × M]` nodes.
pub fn distance_node(g: &mut Graph, p: NodeId, q: NodeId, metric: DistanceMetric) -> Result<NodeId> {
    match metric {
        DistanceMetric::SquaredL2 => {
            let d = g.sub(p, q)?;
            let sq = g.square(d)?;
            g.sum(sq)
        }
        DistanceMetric::JensenShannon => {
            let sum = g.add(p, q)?;
            let m = g.scale(sum, 0.5)?;
            let lp = g.xlogx(p)?;
            let lq = g.xlogx(q)?;
            let lm = g.xlogx(m)?;
            let s = g.add(lp, lq)?;
            let half = g.scale(s, 0.5)?;
            let t = g.sub(half, lm)?;
            g.sum(t)
        }
    }
}

/// Records `Σ_t λ_t D(p_t^a ‖ p_t^b)` on `g`.
///
/// `reference` is detached unless `symmetric` is set, so gradient flows only
/// through `other`. Both traces must live on `g`.
pub fn sequence_distance(
    g: &mut Graph,
    reference: &ForwardTrace,
    other: &ForwardTrace,
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
    reduction: Reduction,
    symmetric: bool,
) -> Result<NodeId> {
    if reference.steps() != other.steps() {
        return Err(Error::invalid(format!(
            "traces have {} and {} steps",
            reference.steps(),
            other.steps()
        )));
    }
    let refs: Vec<NodeId> = reference
        .predictions
        .iter()
        .map(|&id| if symmetric { id } else { g.detach(id) })
        .collect();
    distance_against(g, &refs, &other.predictions, lambda, metric, reduction)
}

/// `Σ_t λ_t D(reference_t ‖ other_t)` where `reference` nodes are used as given.
pub fn distance_against(
    g: &mut Graph,
    reference: &[NodeId],
    other: &[NodeId],
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
    reduction: Reduction,
) -> Result<NodeId> {
    let weights = lambda.weights(other.len())?;
    if reference.len() != other.len() {
        return Err(Error::invalid("reference and trace lengths differ"));
    }
    let rows = g.value(other[0]).dims2().0;
    let norm = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / rows as f64,
    };
    let mut total: Option<NodeId> = None;
    for ((&r, &o), &w) in reference.iter().zip(other).zip(&weights) {
        if w == 0.0 {
            continue;
        }
        let d = distance_node(g, r, o, metric)?;
        let d = g.scale(d, w * norm)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(total.expect("schedule has a positive weight"))
}
