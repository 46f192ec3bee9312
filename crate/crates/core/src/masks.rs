//! Dropout masks and the adversarial mask search.
//!
//! The search works on a continuous relaxation of the recurrent mask: with the
//! mask registered as a tape leaf, one backward pass through the unrolled
//! network yields the *influence map*, the derivative of the weighted output
//! distance with respect to every mask element. [`flip`] then toggles the
//! elements whose flip is predicted to grow the distance the most, subject to
//! a Hamming budget around the base mask, and [`adversarial_mask`] repeats
//! influence-map evaluation and flipping over `K` stages with a growing budget.
//!
//! All batch-level functions take one mask per batch row; every row is
//! searched independently but in the same forward/backward pass.

use log::warn;
use rand::Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::regularizers::{distance_against, sequence_distance_rows, DistanceMetric, LambdaSchedule, Reduction};
use crate::rnn::{self, RnnParams, SequenceBatch};
use crate::tensor::Tensor;

/// How kept activations are rescaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scaling {
    /// Divide by `1 − p`.
    Inverted,
    /// Use the mask as is; requires `p = 0`.
    None,
}

/// Binary keep (1) / drop (0) vector over hidden units.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DropoutMask {
    bits: Vec<u8>,
    p_bits: u64,
    scaling: Scaling,
}

impl DropoutMask {
    pub fn new(bits: Vec<u8>, p: f64, scaling: Scaling) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("mask must have at least one element"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask elements must be 0 or 1"));
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if scaling == Scaling::None && p != 0.0 {
            return Err(Error::invalid("an unscaled mask must have p = 0"));
        }
        Ok(DropoutMask { bits, p_bits: p.to_bits(), scaling })
    }

    /// The expected-mask network: all ones, no scaling.
    pub fn ones(hidden: usize) -> Self {
        DropoutMask { bits: vec![1; hidden], p_bits: 0f64.to_bits(), scaling: Scaling::None }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn p(&self) -> f64 {
        f64::from_bits(self.p_bits)
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    /// Probability to hand to the forward pass: `p` for inverted masks, 0 otherwise.
    pub fn forward_p(&self) -> f64 {
        match self.scaling {
            Scaling::Inverted => self.p(),
            Scaling::None => 0.0,
        }
    }

    pub fn hamming(&self, other: &DropoutMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count()
    }

    pub fn toggle(&mut self, i: usize) {
        self.bits[i] ^= 1;
    }

    pub fn dropped(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn values(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.values())
    }
}

/// Stacks one mask per row into `[B × H]`, checking they agree on `p` and scaling.
pub fn stack(masks: &[DropoutMask]) -> Result<(Tensor, f64)> {
    let first = masks.first().ok_or_else(|| Error::invalid("no masks"))?;
    let h = first.len();
    let mut data = Vec::with_capacity(masks.len() * h);
    for m in masks {
        if m.len() != h || m.scaling != first.scaling || m.p_bits != first.p_bits {
            return Err(Error::invalid("masks in one batch must share size, p and scaling"));
        }
        data.extend(m.bits.iter().map(|&b| b as f64));
    }
    Ok((Tensor::from_parts(vec![masks.len(), h], data), first.forward_p()))
}

/// I.i.d. Bernoulli(1 − p) keep bits with inverted scaling.
pub fn sample_mask<R: Rng + ?Sized>(p: f64, hidden: usize, rng: &mut R) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    let bits = (0..hidden).map(|_| (rng.random::<f64>() >= p) as u8).collect();
    DropoutMask::new(bits, p, Scaling::Inverted)
}

/// Which network supervises the perturbed one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseMaskPolicy {
    /// The expected mask: all ones, unscaled, i.e. the full network.
    Expected,
    /// A fresh Bernoulli mask per row.
    Sampled,
}

impl std::str::FromStr for BaseMaskPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected" => Ok(BaseMaskPolicy::Expected),
            "sampled" => Ok(BaseMaskPolicy::Sampled),
            other => Err(Error::invalid(format!("unknown base mask policy {other:?}"))),
        }
    }
}

impl std::fmt::Display for BaseMaskPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaseMaskPolicy::Expected => "expected",
            BaseMaskPolicy::Sampled => "sampled",
        })
    }
}

/// One base mask per row. `Sampled` draws at probability `p`.
pub fn base_masks<R: Rng + ?Sized>(
    policy: BaseMaskPolicy,
    p: f64,
    hidden: usize,
    rows: usize,
    rng: &mut R,
) -> Result<Vec<DropoutMask>> {
    match policy {
        BaseMaskPolicy::Expected => Ok(vec![DropoutMask::ones(hidden); rows]),
        BaseMaskPolicy::Sampled => (0..rows).map(|_| sample_mask(p, hidden, rng)).collect(),
    }
}

/// Starting point of the search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitPolicy {
    /// Toggle one uniformly chosen element of the base mask.
    SingleRandomFlip,
    /// Start from the base mask itself. Only useful when the model has another
    /// noise source; otherwise the influence map is identically zero.
    Copy,
}

pub fn init_search_mask<R: Rng + ?Sized>(
    base: &DropoutMask,
    policy: InitPolicy,
    rng: &mut R,
) -> DropoutMask {
    let mut m = base.clone();
    if policy == InitPolicy::SingleRandomFlip {
        let i = rng.random_range(0..m.len());
        m.toggle(i);
    }
    m
}

/// Intensity `δ` and stage count `K` of the search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvConfig {
    pub delta: f64,
    pub stages: usize,
    pub init: InitPolicy,
}

impl AdvConfig {
    pub fn new(delta: f64, stages: usize) -> Result<Self> {
        let cfg = AdvConfig { delta, stages, init: InitPolicy::SingleRandomFlip };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.stages == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        Ok(())
    }

    /// `max(1, ⌊δ·H⌋)` elements may differ from the base mask.
    pub fn budget(&self, hidden: usize) -> usize {
        stage_budget(self.delta, 1, 1, hidden)
    }

    /// Budget of stage `k` (0-based): `max(1, ⌊(k+1)/K · δ·H⌋)`.
    pub fn stage_budget(&self, k: usize, hidden: usize) -> usize {
        stage_budget(self.delta, k + 1, self.stages, hidden)
    }
}

fn stage_budget(delta: f64, num: usize, den: usize, hidden: usize) -> usize {
    // the epsilon keeps e.g. 0.03·100 from flooring to 2
    let raw = (num as f64 / den as f64) * delta * hidden as f64;
    ((raw + 1e-9).floor() as usize).max(1)
}

/// Derivative of the weighted distance with respect to each mask element.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceMap {
    pub scores: Vec<f64>,
    /// The mask the derivative was taken at.
    pub at: DropoutMask,
    /// Set when the mask equals the base mask: the distance sits at its
    /// minimum there and the map is zero by construction.
    pub degenerate: bool,
}

/// Influence maps of every batch row, one forward and one backward pass.
///
/// The base-mask predictions are fixed targets; no gradient flows through them.
pub fn influence_map(
    params: &RnnParams,
    batch: &SequenceBatch,
    base: &[DropoutMask],
    search: &[DropoutMask],
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
) -> Result<Vec<InfluenceMap>> {
    let reference = reference_predictions(params, batch, base)?;
    influence_with_reference(params, batch, &reference, base, search, lambda, metric)
}

pub(crate) fn reference_predictions(
    params: &RnnParams,
    batch: &SequenceBatch,
    base: &[DropoutMask],
) -> Result<Vec<Tensor>> {
    check_rows(batch, base, params.hidden())?;
    let (m, p) = stack(base)?;
    rnn::predict(params, batch, &m, p)
}

fn check_rows(batch: &SequenceBatch, masks: &[DropoutMask], hidden: usize) -> Result<()> {
    if masks.len() != batch.batch_size() {
        return Err(Error::invalid(format!(
            "{} masks for a batch of {}",
            masks.len(),
            batch.batch_size()
        )));
    }
    if masks.iter().any(|m| m.len() != hidden) {
        return Err(Error::invalid(format!("masks must have {hidden} elements")));
    }
    Ok(())
}

fn influence_with_reference(
    params: &RnnParams,
    batch: &SequenceBatch,
    reference: &[Tensor],
    base: &[DropoutMask],
    search: &[DropoutMask],
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
) -> Result<Vec<InfluenceMap>> {
    check_rows(batch, search, params.hidden())?;
    let degenerate: Vec<bool> = base.iter().zip(search).map(|(b, s)| b == s).collect();
    if degenerate.iter().any(|&d| d) {
        warn!(
            "influence map requested at the base mask for {} row(s); returning zero scores",
            degenerate.iter().filter(|&&d| d).count()
        );
    }

    let (mask_values, p) = stack(search)?;
    let mut g = Graph::with_capacity(batch.steps() * 40);
    let pn = params.register(&mut g, false);
    let mask = g.leaf(mask_values);
    let trace = rnn::forward_sequence(&mut g, &pn, batch, mask, p)?;
    let refs: Vec<_> = reference.iter().map(|t| g.constant(t.clone())).collect();
    let total = distance_against(&mut g, &refs, &trace.predictions, lambda, metric, Reduction::Sum)?;
    g.backward(total)?;
    let grad = g.grad(mask);

    Ok(search
        .iter()
        .enumerate()
        .map(|(r, s)| {
            let scores = if degenerate[r] { vec![0.0; s.len()] } else { grad.row(r).to_vec() };
            InfluenceMap { scores, at: s.clone(), degenerate: degenerate[r] }
        })
        .collect())
}

/// Greedy toggling in descending order of the flip influence
/// `s = (1 − 2ε) ⊙ IM`.
///
/// An element is toggled only while its score is positive and the number of
/// elements differing from `base` stays within `budget`; the scan stops at the
/// first element that fails either test. Ties go to the lower index.
pub fn flip(search: &DropoutMask, im: &InfluenceMap, base: &DropoutMask, budget: usize) -> DropoutMask {
    let scores: Vec<f64> = search
        .bits
        .iter()
        .zip(&im.scores)
        .map(|(&e, &v)| (1.0 - 2.0 * e as f64) * v)
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut out = search.clone();
    let mut differing = out.hamming(base);
    for i in order {
        if !(scores[i] > 0.0) {
            break;
        }
        let moves_away = out.bits[i] == base.bits[i];
        let next = if moves_away { differing + 1 } else { differing - 1 };
        if next > budget {
            break;
        }
        out.toggle(i);
        differing = next;
    }
    out
}

/// Result of the staged search, with the intermediate masks kept for auditing.
#[derive(Clone, Debug)]
pub struct SearchTrace {
    /// `stages[k][row]` is the mask after stage `k`; `stages[0]` is the initial mask.
    pub stages: Vec<Vec<DropoutMask>>,
}

impl SearchTrace {
    pub fn final_masks(&self) -> &[DropoutMask] {
        self.stages.last().expect("at least the initial stage")
    }
}

/// Approximate worst-case masks within the budget, one per batch row.
pub fn adversarial_mask<R: Rng + ?Sized>(
    params: &RnnParams,
    batch: &SequenceBatch,
    base: &[DropoutMask],
    cfg: &AdvConfig,
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
    rng: &mut R,
) -> Result<Vec<DropoutMask>> {
    Ok(adversarial_search(params, batch, base, cfg, lambda, metric, rng)?.final_masks().to_vec())
}

/// [`adversarial_mask`] returning every stage.
pub fn adversarial_search<R: Rng + ?Sized>(
    params: &RnnParams,
    batch: &SequenceBatch,
    base: &[DropoutMask],
    cfg: &AdvConfig,
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
    rng: &mut R,
) -> Result<SearchTrace> {
    let initial: Vec<DropoutMask> = base.iter().map(|b| init_search_mask(b, cfg.init, rng)).collect();
    search_from(params, batch, base, initial, cfg, lambda, metric)
}

/// The staged search from caller-chosen starting masks.
pub fn search_from(
    params: &RnnParams,
    batch: &SequenceBatch,
    base: &[DropoutMask],
    initial: Vec<DropoutMask>,
    cfg: &AdvConfig,
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
) -> Result<SearchTrace> {
    cfg.validate()?;
    let reference = reference_predictions(params, batch, base)?;
    let hidden = params.hidden();
    let mut current = initial;
    let mut stages = vec![current.clone()];
    for k in 0..cfg.stages {
        let maps = influence_with_reference(params, batch, &reference, base, &current, lambda, metric)?;
        let budget = cfg.stage_budget(k, hidden);
        current = current
            .iter()
            .zip(&maps)
            .zip(base)
            .map(|((s, im), b)| flip(s, im, b, budget))
            .collect();
        stages.push(current.clone());
    }
    Ok(SearchTrace { stages })
}

/// Largest mask size [`brute_force_adversarial`] will enumerate.
pub const MAX_BRUTE_FORCE_HIDDEN: usize = 16;

/// Every mask within Hamming distance `budget` of `base`, in ascending order of
/// the toggled-index bit pattern.
pub fn feasible_masks(base: &DropoutMask, budget: usize) -> Result<Vec<DropoutMask>> {
    let h = base.len();
    if h > MAX_BRUTE_FORCE_HIDDEN {
        return Err(Error::invalid(format!(
            "exhaustive search supports at most {MAX_BRUTE_FORCE_HIDDEN} units, got {h}"
        )));
    }
    let mut out = Vec::new();
    for pattern in 0u32..(1u32 << h) {
        if pattern.count_ones() as usize > budget {
            continue;
        }
        let mut m = base.clone();
        for i in 0..h {
            if pattern >> i & 1 == 1 {
                m.toggle(i);
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Exact maximiser of the weighted distance (summed over batch rows) among all
/// masks within `budget` of `base`, with one mask shared by every row.
pub fn brute_force_adversarial(
    params: &RnnParams,
    batch: &SequenceBatch,
    base: &DropoutMask,
    budget: usize,
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
) -> Result<(DropoutMask, f64)> {
    let candidates = feasible_masks(base, budget)?;
    let values = shared_mask_distances(params, batch, base, &candidates, lambda, metric)?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    Ok((candidates[best].clone(), values[best]))
}

/// Weighted distance between the `base` network and each candidate mask
/// (shared over the batch), summed over rows.
pub fn shared_mask_distances(
    params: &RnnParams,
    batch: &SequenceBatch,
    base: &DropoutMask,
    candidates: &[DropoutMask],
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
) -> Result<Vec<f64>> {
    let b = batch.batch_size();
    let reference = rnn::predict(params, batch, &base.to_tensor(), base.forward_p())?;
    const CHUNK_ROWS: usize = 4096;
    let per_chunk = (CHUNK_ROWS / b).max(1);
    let mut out = Vec::with_capacity(candidates.len());
    for chunk in candidates.chunks(per_chunk) {
        let rows: Vec<usize> = (0..chunk.len()).flat_map(|_| 0..b).collect();
        let big = batch.select(&rows);
        let expanded: Vec<DropoutMask> =
            chunk.iter().flat_map(|m| std::iter::repeat_n(m.clone(), b)).collect();
        let (m, p) = stack(&expanded)?;
        let preds = rnn::predict(params, &big, &m, p)?;
        let refs: Vec<Tensor> = reference
            .iter()
            .map(|t| {
                let mut data = Vec::with_capacity(rows.len() * t.dims2().1);
                for &r in &rows {
                    data.extend_from_slice(t.row(r));
                }
                Tensor::from_parts(vec![rows.len(), t.dims2().1], data)
            })
            .collect();
        let d = sequence_distance_rows(&refs, &preds, lambda, metric)?;
        out.extend(d.chunks(b).map(|c| c.iter().sum::<f64>()));
    }
    Ok(out)
}

/// Per-row weighted distance between each row's `base` mask and its `other` mask.
pub fn row_distances(
    params: &RnnParams,
    batch: &SequenceBatch,
    base: &[DropoutMask],
    other: &[DropoutMask],
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
) -> Result<Vec<f64>> {
    let reference = reference_predictions(params, batch, base)?;
    check_rows(batch, other, params.hidden())?;
    let (m, p) = stack(other)?;
    let preds = rnn::predict(params, batch, &m, p)?;
    sequence_distance_rows(&reference, &preds, lambda, metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn im(scores: Vec<f64>, at: &DropoutMask) -> InfluenceMap {
        InfluenceMap { scores, at: at.clone(), degenerate: false }
    }

    #[test]
    fn flip_hand_trace() {
        let base = DropoutMask::ones(4);
        let map = im(vec![0.5, -0.2, 0.1, -0.4], &base);
        assert_eq!(flip(&base, &map, &base, 1).bits(), &[1, 1, 1, 0]);
        assert_eq!(flip(&base, &map, &base, 2).bits(), &[1, 0, 1, 0]);
        // index 3 has s = −0.1 and never flips, whatever the budget
        for budget in 0..=4 {
            assert_eq!(flip(&base, &map, &base, budget).bits()[2], 1);
        }
        assert_eq!(flip(&base, &map, &base, 0), base);
    }

    #[test]
    fn flip_breaks_ties_by_lower_index() {
        let base = DropoutMask::ones(3);
        let map = im(vec![-1.0, -1.0, -1.0], &base);
        assert_eq!(flip(&base, &map, &base, 1).bits(), &[0, 1, 1]);
    }

    #[test]
    fn flip_can_restore_a_differing_element() {
        let base = DropoutMask::ones(3);
        let mut s = base.clone();
        s.toggle(1);
        // restoring index 1 scores +0.9, dropping index 0 scores +0.5
        let map = im(vec![-0.5, 0.9, 0.1], &s);
        assert_eq!(flip(&s, &map, &base, 1).bits(), &[0, 1, 1]);
    }

    #[test]
    fn budget_rule() {
        let cfg = AdvConfig::new(0.03, 2).unwrap();
        assert_eq!(cfg.budget(100), 3);
        assert_eq!(cfg.stage_budget(0, 100), 1);
        assert_eq!(cfg.stage_budget(1, 100), 3);
        assert_eq!(cfg.budget(10), 1);
        assert!(AdvConfig::new(0.0, 1).is_err());
        assert!(AdvConfig::new(0.5, 0).is_err());
    }

    #[test]
    fn sample_mask_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(0.0, 50, &mut rng).unwrap().bits().iter().all(|&b| b == 1));
        assert!(sample_mask(1.0, 5, &mut rng).is_err());
        assert!(sample_mask(-0.1, 5, &mut rng).is_err());
        let m = sample_mask(0.999, 1000, &mut rng).unwrap();
        assert!(m.dropped() > 980);
    }

    #[test]
    fn unscaled_mask_requires_zero_p() {
        assert!(DropoutMask::new(vec![1, 0], 0.2, Scaling::None).is_err());
        assert!(DropoutMask::new(vec![1, 2], 0.0, Scaling::None).is_err());
    }

    #[test]
    fn init_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = DropoutMask::ones(6);
        let s = init_search_mask(&base, InitPolicy::SingleRandomFlip, &mut rng);
        assert_eq!(s.hamming(&base), 1);
        assert_eq!(init_search_mask(&base, InitPolicy::Copy, &mut rng), base);
    }

    #[test]
    fn feasible_set_size() {
        let base = DropoutMask::ones(5);
        // 1 + 5 + 10
        assert_eq!(feasible_masks(&base, 2).unwrap().len(), 16);
        assert_eq!(feasible_masks(&base, 5).unwrap().len(), 32);
        assert!(feasible_masks(&DropoutMask::ones(17), 1).is_err());
    }
}
