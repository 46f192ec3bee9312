//! Property suites run on freshly sampled tiny models.
//!
//! Each suite returns one [`Check`] per printed line; a suite passes when every
//! check does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{numeric_gradient, rel_error, DEFAULT_STEP};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::masks::{self, AdvConfig, BaseMaskPolicy, DropoutMask, InitPolicy};
use crate::regularizers::{proposition1_check, remark1_check, sequence_distance_rows, DistanceMetric, LambdaSchedule};
use crate::rnn::{self, CellKind, RnnParams, SequenceBatch, Targets};
use crate::tensor::Tensor;
use crate::training::{batch_loss, plan_masks, MaskPlan, RegularizerKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Im,
    Remark1,
    Prop1,
    FlipOracle,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Grad, Suite::Im, Suite::Remark1, Suite::Prop1, Suite::FlipOracle];
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Suite::Grad),
            "im" => Ok(Suite::Im),
            "remark1" => Ok(Suite::Remark1),
            "prop1" => Ok(Suite::Prop1),
            "flip-oracle" => Ok(Suite::FlipOracle),
            other => Err(Error::invalid(format!("unknown suite {other:?}"))),
        }
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Suite::Grad => "grad",
            Suite::Im => "im",
            Suite::Remark1 => "remark1",
            Suite::Prop1 => "prop1",
            Suite::FlipOracle => "flip-oracle",
        })
    }
}

/// One reported comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Instance counts and sample sizes for every suite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scale {
    pub grad_graphs: usize,
    pub im_instances: usize,
    pub remark1_models: usize,
    pub remark1_samples: usize,
    pub prop1_models: usize,
    pub prop1_samples: usize,
    pub flip_instances: usize,
    pub greedy_trials: usize,
}

impl Default for Scale {
    fn default() -> Self {
        Scale {
            grad_graphs: 100,
            im_instances: 50,
            remark1_models: 20,
            remark1_samples: 2000,
            prop1_models: 100,
            prop1_samples: 2000,
            flip_instances: 1000,
            greedy_trials: 200,
        }
    }
}

impl Scale {
    /// A few instances of each, for smoke tests.
    pub fn quick() -> Self {
        Scale {
            grad_graphs: 4,
            im_instances: 3,
            remark1_models: 2,
            remark1_samples: 200,
            prop1_models: 3,
            prop1_samples: 200,
            flip_instances: 20,
            greedy_trials: 10,
        }
    }
}

pub const GRAD_TOL: f64 = 1e-4;
pub const IM_TOL: f64 = 1e-3;
pub const IM_STEP: f64 = 1e-4;
pub const SIGMAS: f64 = 3.0;
pub const FD_RATE: f64 = 0.95;
pub const GREEDY_RATIO: f64 = 0.7;
pub const GREEDY_RATE: f64 = 0.9;

pub fn run_suite(suite: Suite, seed: u64, scale: &Scale) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match suite {
        Suite::Grad => grad_suite(scale.grad_graphs, &mut rng),
        Suite::Im => im_suite(scale.im_instances, &mut rng),
        Suite::Remark1 => remark1_suite(scale.remark1_models, scale.remark1_samples, &mut rng),
        Suite::Prop1 => prop1_suite(scale.prop1_models, scale.prop1_samples, &mut rng),
        Suite::FlipOracle => flip_suite(scale.flip_instances, scale.greedy_trials, &mut rng),
    }
}

/// Random model and batch: inputs uniform in [−2, 2], a random target kind.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    kind: CellKind,
    hidden: usize,
    steps: usize,
    rows: usize,
) -> Result<(RnnParams, SequenceBatch)> {
    let input = rng.random_range(1..=3);
    let classes = rng.random_range(2..=4);
    let params = RnnParams::init(kind, input, hidden, classes, rng)?;
    let inputs = (0..steps)
        .map(|_| Tensor::matrix(rows, input, (0..rows * input).map(|_| rng.random_range(-2.0..2.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let targets = if rng.random_bool(0.5) {
        Targets::Final((0..rows).map(|_| rng.random_range(0..classes)).collect())
    } else {
        Targets::PerStep((0..rows).map(|_| (0..steps).map(|_| rng.random_range(0..classes)).collect()).collect())
    };
    Ok((params, SequenceBatch::new(inputs, targets)?))
}

fn random_lambda(rng: &mut ChaCha8Rng, steps: usize) -> LambdaSchedule {
    match rng.random_range(0..3) {
        0 => LambdaSchedule::FinalStep,
        1 => LambdaSchedule::Uniform,
        _ => LambdaSchedule::Explicit((0..steps).map(|_| rng.random_range(0.1..1.0)).collect()),
    }
}

fn metric_for(i: usize) -> DistanceMetric {
    if i % 2 == 0 {
        DistanceMetric::SquaredL2
    } else {
        DistanceMetric::JensenShannon
    }
}

fn kind_for(i: usize) -> CellKind {
    if i % 2 == 0 {
        CellKind::Rnn
    } else {
        CellKind::Lstm
    }
}

fn masked_predictions(params: &RnnParams, batch: &SequenceBatch, ms: Option<&[DropoutMask]>) -> Result<Vec<Tensor>> {
    match ms {
        None => rnn::predict_full(params, batch),
        Some(ms) => {
            let (m, p) = masks::stack(ms)?;
            rnn::predict(params, batch, &m, p)
        }
    }
}

/// The objective whose gradient training follows, built without the tape:
/// task loss at `params`, plus the regularizer with every detached
/// (supervising) trace evaluated at the frozen `anchor` weights.
fn oracle_objective(
    params: &RnnParams,
    anchor: &RnnParams,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    plan: &MaskPlan,
) -> Result<f64> {
    let mut g = Graph::new();
    let pn = params.register(&mut g, false);
    let loss = batch_loss(&mut g, &pn, batch, cfg, plan)?;
    let task = g.value(loss.task).item();
    let frozen = |both: bool| if both { params } else { anchor };
    let (reference, perturbed) = match plan {
        MaskPlan::Full | MaskPlan::Dropout(_) => return Ok(task),
        MaskPlan::El(ms) => (
            masked_predictions(frozen(cfg.symmetric), batch, None)?,
            masked_predictions(params, batch, Some(ms))?,
        ),
        MaskPlan::Fd(a, b) => (
            masked_predictions(frozen(cfg.symmetric), batch, Some(a))?,
            masked_predictions(params, batch, Some(b))?,
        ),
        MaskPlan::Adversarial { base, adversarial } => (
            masked_predictions(anchor, batch, Some(base))?,
            masked_predictions(params, batch, Some(adversarial))?,
        ),
    };
    let rows = sequence_distance_rows(&reference, &perturbed, &cfg.lambda, cfg.metric)?;
    Ok(task + cfg.reg_weight * rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Largest relative error between the tape gradient of the training
/// objective and central differences of [`oracle_objective`], over every
/// parameter.
pub fn training_gradient_error(params: &RnnParams, batch: &SequenceBatch, cfg: &TrainConfig, plan: &MaskPlan) -> Result<f64> {
    let mut g = Graph::new();
    let pn = params.register(&mut g, true);
    let loss = batch_loss(&mut g, &pn, batch, cfg, plan)?;
    g.backward(loss.total)?;
    let analytic = pn.grads(&g);
    let mut worst = 0.0f64;
    for (j, a) in analytic.iter().enumerate() {
        let x = params.tensors()[j].clone();
        let numeric = numeric_gradient(
            |probe| {
                let mut q = params.clone();
                *q.tensors_mut()[j] = probe.clone();
                oracle_objective(&q, params, batch, cfg, plan)
            },
            &x,
            DEFAULT_STEP,
        )?;
        for (&av, &nv) in a.data().iter().zip(numeric.data()) {
            worst = worst.max(rel_error(av, nv));
        }
    }
    Ok(worst)
}

fn grad_suite(graphs: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let regs = [RegularizerKind::None, RegularizerKind::El, RegularizerKind::Fd, RegularizerKind::Add];
    let mut worst = 0.0f64;
    let mut worst_at = 0;
    for i in 0..graphs {
        let hidden = rng.random_range(1..=8);
        let steps = rng.random_range(1..=8);
        let rows = rng.random_range(1..=3);
        let (params, batch) = random_instance(rng, kind_for(i), hidden, steps, rows)?;
        let cfg = TrainConfig {
            regularizer: regs[(i / 2) % regs.len()],
            reg_weight: rng.random_range(0.1..2.0),
            dropout_p: rng.random_range(0.1..0.5),
            adv: AdvConfig { delta: 0.3, stages: 2, init: InitPolicy::SingleRandomFlip },
            base_policy: if rng.random_bool(0.5) { BaseMaskPolicy::Expected } else { BaseMaskPolicy::Sampled },
            lambda: random_lambda(rng, steps),
            metric: metric_for(i / 8),
            symmetric: rng.random_bool(0.5),
            ..TrainConfig::default()
        };
        let plan = plan_masks(&params, &batch, &cfg, rng)?;
        let err = training_gradient_error(&params, &batch, &cfg, &plan)?;
        if err > worst {
            worst = err;
            worst_at = i;
        }
    }
    Ok(vec![Check::new(
        "grad",
        worst <= GRAD_TOL,
        format!("{graphs} RNN/LSTM graphs (H<=8, T<=8), max rel err {worst:.3e} (graph {worst_at}) vs tol {GRAD_TOL:e}"),
    )])
}

/// Summed weighted distance to fixed reference outputs, as a function of
/// the (continuous) mask values.
fn mask_objective<'a>(
    params: &'a RnnParams,
    batch: &'a SequenceBatch,
    reference: &'a [Tensor],
    p: f64,
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
) -> impl Fn(&Tensor) -> Result<f64> + 'a {
    let lambda = lambda.clone();
    move |m: &Tensor| {
        let preds = rnn::predict(params, batch, m, p)?;
        Ok(sequence_distance_rows(reference, &preds, &lambda, metric)?.iter().sum())
    }
}

/// Worst coordinate error of the influence maps, relative to the largest
/// finite-difference entry of the instance.
pub fn influence_map_error(
    params: &RnnParams,
    batch: &SequenceBatch,
    base: &[DropoutMask],
    search: &[DropoutMask],
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
) -> Result<f64> {
    let maps = masks::influence_map(params, batch, base, search, lambda, metric)?;
    let (bm, bp) = masks::stack(base)?;
    let reference = rnn::predict(params, batch, &bm, bp)?;
    let (sm, sp) = masks::stack(search)?;
    let numeric = numeric_gradient(mask_objective(params, batch, &reference, sp, lambda, metric), &sm, IM_STEP)?;
    let scale = numeric.data().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-8);
    let mut worst = 0.0f64;
    for (r, im) in maps.iter().enumerate() {
        for (a, n) in im.scores.iter().zip(numeric.row(r)) {
            worst = worst.max((a - n).abs() / scale);
        }
    }
    Ok(worst)
}

fn toggled(base: &DropoutMask, count: usize, rng: &mut ChaCha8Rng) -> DropoutMask {
    let mut m = base.clone();
    let mut idx: Vec<usize> = (0..m.len()).collect();
    for k in 0..count.min(m.len()) {
        let j = rng.random_range(k..idx.len());
        idx.swap(k, j);
        m.toggle(idx[k]);
    }
    m
}

fn im_suite(instances: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut worst = [0.0f64; 2];
    for i in 0..instances {
        let hidden = rng.random_range(2..=8);
        let steps = rng.random_range(1..=6);
        let rows = rng.random_range(1..=3);
        let (params, batch) = random_instance(rng, kind_for(i), hidden, steps, rows)?;
        let lambda = random_lambda(rng, steps);
        let base: Vec<DropoutMask> = if i % 4 < 2 {
            vec![DropoutMask::ones(hidden); rows]
        } else {
            (0..rows).map(|_| masks::sample_mask(0.3, hidden, rng)).collect::<Result<_>>()?
        };
        let search: Vec<DropoutMask> = base
            .iter()
            .map(|b| {
                let c = rng.random_range(1..=3.min(hidden));
                toggled(b, c, rng)
            })
            .collect();
        for (mi, metric) in [DistanceMetric::SquaredL2, DistanceMetric::JensenShannon].into_iter().enumerate() {
            let err = influence_map_error(&params, &batch, &base, &search, &lambda, metric)?;
            worst[mi] = worst[mi].max(err);
        }
    }
    Ok([DistanceMetric::SquaredL2, DistanceMetric::JensenShannon]
        .iter()
        .zip(worst)
        .map(|(m, w)| {
            Check::new(
                format!("im[{m}]"),
                w <= IM_TOL,
                format!("{instances} instances, max rel err {w:.3e} vs tol {IM_TOL:e} (h = {IM_STEP:e})"),
            )
        })
        .collect())
}

fn remark1_suite(models: usize, samples: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::with_capacity(models);
    for i in 0..models {
        let hidden = rng.random_range(2..=6);
        let steps = rng.random_range(2..=4);
        let rows = rng.random_range(1..=3);
        let (params, batch) = random_instance(rng, kind_for(i), hidden, steps, rows)?;
        let p = rng.random_range(0.1..0.5);
        let cfg = AdvConfig::new(0.35, 2)?;
        let r = remark1_check(&params, &batch, p, samples, &cfg, rng)?;
        out.push(Check::new(
            format!("remark1 model {i}"),
            r.holds(SIGMAS),
            format!(
                "lhs {:.6e} rhs {:.6e} |diff| {:.3e} vs {SIGMAS}σ = {:.3e} (N = {samples})",
                r.lhs.value,
                r.rhs.value,
                r.discrepancy(),
                SIGMAS * r.combined_std_err()
            ),
        ));
    }
    Ok(out)
}

fn prop1_suite(models: usize, samples: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut out = Vec::with_capacity(models + 1);
    let mut fd_ok = 0;
    for i in 0..models {
        let hidden = rng.random_range(2..=12);
        let steps = rng.random_range(2..=4);
        let rows = rng.random_range(1..=3);
        let (params, batch) = random_instance(rng, kind_for(i), hidden, steps, rows)?;
        let lambda = random_lambda(rng, steps);
        let p = rng.random_range(0.1..0.4);
        let r = proposition1_check(&params, &batch, p, 0.25, samples, &lambda, metric_for(i / 2), rng)?;
        if r.fd_below_el(0.0) {
            fd_ok += 1;
        }
        out.push(Check::new(
            format!("prop1 model {i}"),
            r.el_below_add(SIGMAS),
            format!(
                "(¼FD, EL, AdD) = ({:.4e}, {:.4e}, {:.4e}), H = {hidden}, budget {}",
                r.fd_quarter.mean, r.el.mean, r.add_exact, r.budget
            ),
        ));
    }
    let rate = fd_ok as f64 / models.max(1) as f64;
    out.push(Check::new(
        "prop1 ¼FD<=EL",
        rate >= FD_RATE,
        format!("{fd_ok}/{models} = {:.1}% vs required {:.0}% (S = {samples})", 100.0 * rate, 100.0 * FD_RATE),
    ));
    Ok(out)
}

/// Flip scores `(1 − 2ε)·IM`, as used by the greedy step.
fn flip_scores(search: &DropoutMask, scores: &[f64]) -> Vec<f64> {
    search.bits().iter().zip(scores).map(|(&e, &v)| (1.0 - 2.0 * e as f64) * v).collect()
}

/// Violations of the single-step rules for one instance: result outside the
/// budget, a toggle against a non-positive score, or a skipped higher score.
pub fn flip_violations(search: &DropoutMask, scores: &[f64], base: &DropoutMask, budget: usize, out: &DropoutMask) -> Vec<String> {
    let mut v = Vec::new();
    if out.hamming(base) > budget {
        v.push(format!("hamming {} > budget {budget}", out.hamming(base)));
    }
    let s = flip_scores(search, scores);
    let changed: Vec<usize> = (0..s.len()).filter(|&i| out.bits()[i] != search.bits()[i]).collect();
    for &i in &changed {
        if !(s[i] > 0.0) {
            v.push(format!("unit {i} toggled with score {}", s[i]));
        }
        for j in 0..s.len() {
            if !changed.contains(&j) && s[j] > s[i] {
                v.push(format!("unit {j} (score {}) skipped for unit {i} (score {})", s[j], s[i]));
            }
        }
    }
    v
}

/// Name of the greedy-vs-exhaustive quality check.
pub const GREEDY_CHECK: &str = "greedy K=2 vs exhaustive";

fn flip_suite(instances: usize, trials: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut failures: Vec<String> = Vec::new();
    let (mut budget_fail, mut sign_fail, mut oracle_fail) = (0, 0, 0);
    for i in 0..instances {
        let hidden = rng.random_range(2..=10);
        let steps = rng.random_range(2..=4);
        let (params, batch) = random_instance(rng, kind_for(i), hidden, steps, 1)?;
        let lambda = random_lambda(rng, steps);
        let metric = metric_for(i / 2);
        let base = if i % 3 == 0 { masks::sample_mask(0.3, hidden, rng)? } else { DropoutMask::ones(hidden) };
        let budget = rng.random_range(1..=hidden.div_ceil(2));
        let search = masks::init_search_mask(&base, InitPolicy::SingleRandomFlip, rng);
        let im = masks::influence_map(&params, &batch, std::slice::from_ref(&base), std::slice::from_ref(&search), &lambda, metric)?
            .remove(0);
        let out = masks::flip(&search, &im, &base, budget);
        for v in flip_violations(&search, &im.scores, &base, budget, &out) {
            if v.starts_with("hamming") {
                budget_fail += 1;
            } else {
                sign_fail += 1;
            }
            if failures.len() < 3 {
                failures.push(format!("instance {i}: {v}"));
            }
        }
        // the exhaustive maximiser bounds every feasible mask, including the
        // greedy one
        let (_, best) = masks::brute_force_adversarial(&params, &batch, &base, budget, &lambda, metric)?;
        let got = masks::row_distances(&params, &batch, std::slice::from_ref(&base), std::slice::from_ref(&out), &lambda, metric)?[0];
        if got > best + 1e-12 * best.abs().max(1.0) {
            oracle_fail += 1;
            if failures.len() < 3 {
                failures.push(format!("instance {i}: greedy {got} above exhaustive {best}"));
            }
        }
    }
    let note = if failures.is_empty() { String::new() } else { format!(" [{}]", failures.join("; ")) };
    let mut checks = vec![
        Check::new("flip budget", budget_fail == 0, format!("{budget_fail} failures in {instances} instances{note}")),
        Check::new("flip sign rule", sign_fail == 0, format!("{sign_fail} failures in {instances} instances")),
        Check::new("flip oracle dominance", oracle_fail == 0, format!("{oracle_fail} failures in {instances} instances")),
    ];

    let mut good = 0;
    // (reached, trials) for budget 1 and for larger budgets
    let mut by_budget = [(0, 0); 2];
    let mut worst = f64::INFINITY;
    for t in 0..trials {
        let hidden = rng.random_range(2..=10);
        let steps = rng.random_range(2..=4);
        let (params, batch) = random_instance(rng, kind_for(t), hidden, steps, 1)?;
        let lambda = random_lambda(rng, steps);
        let metric = metric_for(t / 2);
        let cfg = AdvConfig::new(0.3, 2)?;
        let base = DropoutMask::ones(hidden);
        let (_, best) = masks::brute_force_adversarial(&params, &batch, &base, cfg.budget(hidden), &lambda, metric)?;
        let found = masks::adversarial_mask(&params, &batch, std::slice::from_ref(&base), &cfg, &lambda, metric, rng)?;
        let got = masks::row_distances(&params, &batch, std::slice::from_ref(&base), &found, &lambda, metric)?[0];
        let ratio = if best > 0.0 { got / best } else { 1.0 };
        worst = worst.min(ratio);
        let slot = &mut by_budget[(cfg.budget(hidden) > 1) as usize];
        slot.1 += 1;
        if ratio >= GREEDY_RATIO {
            good += 1;
            slot.0 += 1;
        }
    }
    let rate = good as f64 / trials.max(1) as f64;
    checks.push(Check::new(
        GREEDY_CHECK,
        rate >= GREEDY_RATE,
        format!(
            "{good}/{trials} = {:.1}% of trials reach {:.0}% of the maximum (required {:.0}%), worst ratio {worst:.3}; \
             budget 1: {}/{}, budget >= 2: {}/{}",
            100.0 * rate,
            100.0 * GREEDY_RATIO,
            100.0 * GREEDY_RATE,
            by_budget[0].0,
            by_budget[0].1,
            by_budget[1].0,
            by_budget[1].1
        ),
    ));
    Ok(checks)
}
