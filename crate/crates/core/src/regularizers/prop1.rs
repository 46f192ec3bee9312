//! Ordering of the three regularizers on a budget-constrained mask domain.
//!
//! Restricting masks to `{ε : Hamming(ε, 1) ≤ b}` gives
//! `¼·FD ≤ EL ≤ AdD`, where AdD is taken with the exact maximiser around the
//! all-ones mask. The right inequality holds sample by sample (the maximiser
//! dominates every feasible draw); the left one holds in expectation because
//! both metrics satisfy `D(a, c) ≤ 2D(a, b) + 2D(b, c)`.

use rand::Rng;

use super::estimators::{paired_mask_distances, Estimate};
use super::{DistanceMetric, LambdaSchedule};
use crate::error::{Error, Result};
use crate::masks::{self, DropoutMask, Scaling};
use crate::rnn::{RnnParams, SequenceBatch};

/// Largest hidden size the check accepts (exhaustive search over the domain).
pub const MAX_HIDDEN: usize = 12;

const MAX_REJECTIONS: usize = 1_000_000;

#[derive(Clone, Debug)]
pub struct Prop1Report {
    pub fd_quarter: Estimate,
    pub el: Estimate,
    pub add_exact: f64,
    pub maximiser: DropoutMask,
    pub budget: usize,
}

impl Prop1Report {
    /// `EL ≤ AdD + sigmas · se(EL)`.
    pub fn el_below_add(&self, sigmas: f64) -> bool {
        self.el.mean <= self.add_exact + sigmas * self.el.std_err + 1e-12
    }

    /// `¼FD ≤ EL + sigmas · combined standard error`.
    pub fn fd_below_el(&self, sigmas: f64) -> bool {
        self.fd_quarter.mean <= self.el.mean + sigmas * self.fd_quarter.std_err.hypot(self.el.std_err) + 1e-12
    }
}

/// Bernoulli(1 − p) bits redrawn until at most `budget` are zero. The result
/// is unscaled, so it lives on the same domain as the exhaustive search.
pub fn sample_constrained_mask<R: Rng + ?Sized>(
    p: f64,
    hidden: usize,
    budget: usize,
    rng: &mut R,
) -> Result<DropoutMask> {
    for _ in 0..MAX_REJECTIONS {
        let m = masks::sample_mask(p, hidden, rng)?;
        if m.dropped() <= budget {
            return DropoutMask::new(m.bits().to_vec(), 0.0, Scaling::None);
        }
    }
    Err(Error::invalid(format!(
        "no mask within budget {budget} after {MAX_REJECTIONS} draws at p = {p}"
    )))
}

/// Estimates `¼·FD` and `EL` from `samples` constrained draws each and finds
/// the exact AdD value with budget `max(1, ⌊δ·H⌋)`.
#[allow(clippy::too_many_arguments)]
pub fn proposition1_check<R: Rng + ?Sized>(
    params: &RnnParams,
    batch: &SequenceBatch,
    p: f64,
    delta: f64,
    samples: usize,
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
    rng: &mut R,
) -> Result<Prop1Report> {
    let h = params.hidden();
    if h > MAX_HIDDEN {
        return Err(Error::invalid(format!("hidden size {h} exceeds {MAX_HIDDEN}")));
    }
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let budget = masks::AdvConfig::new(delta, 1)?.budget(h);
    let ones = DropoutMask::ones(h);
    let draw = |rng: &mut R| sample_constrained_mask(p, h, budget, rng);

    let el_masks = (0..samples).map(|_| draw(rng)).collect::<Result<Vec<_>>>()?;
    let el_values = paired_mask_distances(params, batch, &vec![ones.clone(); samples], &el_masks, lambda, metric)?;

    let mut first = Vec::with_capacity(samples);
    let mut second = Vec::with_capacity(samples);
    for _ in 0..samples {
        first.push(draw(rng)?);
        second.push(draw(rng)?);
    }
    let fd_values = paired_mask_distances(params, batch, &first, &second, lambda, metric)?;

    let (maximiser, total) = masks::brute_force_adversarial(params, batch, &ones, budget, lambda, metric)?;
    Ok(Prop1Report {
        fd_quarter: Estimate::from_values(&fd_values)?.scaled(0.25),
        el: Estimate::from_values(&el_values)?,
        add_exact: total / batch.batch_size() as f64,
        maximiser,
        budget,
    })
}
