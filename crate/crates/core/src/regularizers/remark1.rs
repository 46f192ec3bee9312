//! Variance decomposition of the squared-L2 adversarial distance.
//!
//! For any two random output vectors `a = p(ε)` and `b = p(ε_adv(ε))`,
//!
//! ```text
//! E‖a − b‖² = Σ Var(a) + Σ Var(b) − 2 Σ Cov(a, b) + ‖E a − E b‖²
//! ```
//!
//! [`remark1_check`] estimates both sides from the same draws. Each term comes
//! with a delete-one jackknife standard error.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masks::{self, AdvConfig, DropoutMask};
use crate::regularizers::{DistanceMetric, LambdaSchedule};
use crate::rnn::{self, RnnParams, SequenceBatch};

/// Fewer draws than this make the standard errors meaningless.
pub const MIN_SAMPLES: usize = 30;

/// Rows per search pass.
const CHUNK_ROWS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermEstimate {
    pub value: f64,
    pub std_err: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Remark1Report {
    /// Mean squared distance between base and adversarial outputs.
    pub lhs: TermEstimate,
    pub var_base: TermEstimate,
    pub var_adv: TermEstimate,
    pub cov: TermEstimate,
    pub mean_gap_sq: TermEstimate,
    /// `var_base + var_adv − 2 cov + mean_gap_sq`, with its own jackknife error.
    pub rhs: TermEstimate,
    pub samples: usize,
}

impl Remark1Report {
    pub fn combined_std_err(&self) -> f64 {
        self.lhs.std_err.hypot(self.rhs.std_err)
    }

    pub fn discrepancy(&self) -> f64 {
        (self.lhs.value - self.rhs.value).abs()
    }

    /// `|lhs − rhs| ≤ sigmas · combined standard error` (plus rounding slack).
    pub fn holds(&self, sigmas: f64) -> bool {
        self.discrepancy() <= sigmas * self.combined_std_err() + 1e-12
    }
}

/// Decomposition statistics for paired draws `a[n]`, `b[n]` (all vectors of one length).
///
/// Variances and the covariance use the `N − 1` denominator.
pub fn remark1_from_outputs(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Remark1Report> {
    let n = a.len();
    if n < MIN_SAMPLES {
        return Err(Error::invalid(format!("need at least {MIN_SAMPLES} samples, got {n}")));
    }
    if b.len() != n {
        return Err(Error::invalid("sample lists differ in length"));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::invalid("output vectors differ in length"));
    }

    // Centre each coordinate on its full-sample mean so the running sums below
    // stay well conditioned.
    let mean_of = |x: &[Vec<f64>]| -> Vec<f64> {
        (0..dim).map(|j| x.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect()
    };
    let (ma, mb) = (mean_of(a), mean_of(b));
    let ca: Vec<Vec<f64>> = a.iter().map(|v| v.iter().zip(&ma).map(|(x, m)| x - m).collect()).collect();
    let cb: Vec<Vec<f64>> = b.iter().map(|v| v.iter().zip(&mb).map(|(x, m)| x - m).collect()).collect();

    let mut s_a = vec![0.0; dim];
    let mut s_b = vec![0.0; dim];
    let mut s_aa = vec![0.0; dim];
    let mut s_bb = vec![0.0; dim];
    let mut s_ab = vec![0.0; dim];
    for i in 0..n {
        for j in 0..dim {
            let (x, y) = (ca[i][j], cb[i][j]);
            s_a[j] += x;
            s_b[j] += y;
            s_aa[j] += x * x;
            s_bb[j] += y * y;
            s_ab[j] += x * y;
        }
    }
    let shift: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| x - y).collect();
    let sq_dist: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
        .collect();

    // Statistics from sums over `m` samples with coordinate sums supplied.
    let stats = |m: f64, sa: &dyn Fn(usize) -> f64, sb: &dyn Fn(usize) -> f64,
                 saa: &dyn Fn(usize) -> f64, sbb: &dyn Fn(usize) -> f64, sab: &dyn Fn(usize) -> f64| {
        let (mut va, mut vb, mut cv, mut gap) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..dim {
            let (xa, xb) = (sa(j) / m, sb(j) / m);
            va += (saa(j) - m * xa * xa) / (m - 1.0);
            vb += (sbb(j) - m * xb * xb) / (m - 1.0);
            cv += (sab(j) - m * xa * xb) / (m - 1.0);
            let g = shift[j] + xa - xb;
            gap += g * g;
        }
        [va, vb, cv, gap]
    };

    let full = stats(
        n as f64,
        &|j| s_a[j],
        &|j| s_b[j],
        &|j| s_aa[j],
        &|j| s_bb[j],
        &|j| s_ab[j],
    );
    let lhs_full = sq_dist.iter().sum::<f64>() / n as f64;

    // Delete-one replicates: [var_a, var_b, cov, gap, lhs, rhs].
    let m = (n - 1) as f64;
    let mut reps: Vec<[f64; 6]> = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = (&ca[i], &cb[i]);
        let s = stats(
            m,
            &|j| s_a[j] - x[j],
            &|j| s_b[j] - y[j],
            &|j| s_aa[j] - x[j] * x[j],
            &|j| s_bb[j] - y[j] * y[j],
            &|j| s_ab[j] - x[j] * y[j],
        );
        let lhs = (lhs_full * n as f64 - sq_dist[i]) / m;
        let rhs = s[0] + s[1] - 2.0 * s[2] + s[3];
        reps.push([s[0], s[1], s[2], s[3], lhs, rhs]);
    }
    let jack = |k: usize| -> f64 {
        let mean = reps.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        let ss: f64 = reps.iter().map(|r| (r[k] - mean).powi(2)).sum();
        (ss * m / n as f64).sqrt()
    };
    let term = |value: f64, k: usize| TermEstimate { value, std_err: jack(k) };
    let rhs = full[0] + full[1] - 2.0 * full[2] + full[3];
    Ok(Remark1Report {
        var_base: term(full[0], 0),
        var_adv: term(full[1], 1),
        cov: term(full[2], 2),
        mean_gap_sq: term(full[3], 3),
        lhs: term(lhs_full, 4),
        rhs: term(rhs, 5),
        samples: n,
    })
}

/// Seed for the search started from `mask` on batch row `row`: the same
/// base mask always produces the same adversarial mask.
pub fn mask_seed(mask: &DropoutMask, row: usize) -> u64 {
    // FNV-1a over the bits and the row index
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in mask.bits().iter().chain(&(row as u64).to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Draws `samples` inverted masks at probability `p`, maps each through the
/// greedy search (final-step squared-L2 objective, seeded from the mask), and
/// compares the final-step outputs of the two networks over all batch rows.
pub fn remark1_check<R: Rng + ?Sized>(
    params: &RnnParams,
    batch: &SequenceBatch,
    p: f64,
    samples: usize,
    cfg: &AdvConfig,
    rng: &mut R,
) -> Result<Remark1Report> {
    if samples < MIN_SAMPLES {
        return Err(Error::invalid(format!("need at least {MIN_SAMPLES} samples, got {samples}")));
    }
    let h = params.hidden();
    let draws = (0..samples).map(|_| masks::sample_mask(p, h, rng)).collect::<Result<Vec<_>>>()?;
    let adv = adversarial_map(params, batch, &draws, cfg)?;
    let rows = batch.batch_size();
    let a = final_outputs(params, batch, &draws, rows, |s, _| draws[s].clone())?;
    let b = final_outputs(params, batch, &draws, rows, |s, r| adv[s * rows + r].clone())?;
    remark1_from_outputs(&a, &b)
}

/// Deterministic adversarial mask for every (draw, row) pair, row-major.
fn adversarial_map(
    params: &RnnParams,
    batch: &SequenceBatch,
    draws: &[DropoutMask],
    cfg: &AdvConfig,
) -> Result<Vec<DropoutMask>> {
    let rows = batch.batch_size();
    let per_chunk = (CHUNK_ROWS / rows).max(1);
    let mut out = Vec::with_capacity(draws.len() * rows);
    for chunk in draws.chunks(per_chunk) {
        let idx: Vec<usize> = (0..chunk.len()).flat_map(|_| 0..rows).collect();
        let big = batch.select(&idx);
        let base: Vec<DropoutMask> =
            chunk.iter().flat_map(|m| std::iter::repeat_n(m.clone(), rows)).collect();
        let initial = base
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut r = ChaCha8Rng::seed_from_u64(mask_seed(m, i % rows));
                masks::init_search_mask(m, cfg.init, &mut r)
            })
            .collect();
        let trace = masks::search_from(
            params,
            &big,
            &base,
            initial,
            cfg,
            &LambdaSchedule::FinalStep,
            DistanceMetric::SquaredL2,
        )?;
        out.extend_from_slice(trace.final_masks());
    }
    Ok(out)
}

/// Final-step outputs of every row, concatenated per draw.
fn final_outputs(
    params: &RnnParams,
    batch: &SequenceBatch,
    draws: &[DropoutMask],
    rows: usize,
    mask_for: impl Fn(usize, usize) -> DropoutMask,
) -> Result<Vec<Vec<f64>>> {
    let per_chunk = (CHUNK_ROWS / rows).max(1);
    let mut out = Vec::with_capacity(draws.len());
    let mut start = 0;
    while start < draws.len() {
        let end = (start + per_chunk).min(draws.len());
        let idx: Vec<usize> = (start..end).flat_map(|_| 0..rows).collect();
        let big = batch.select(&idx);
        let ms: Vec<DropoutMask> = (start..end).flat_map(|s| (0..rows).map(move |r| (s, r))).map(|(s, r)| mask_for(s, r)).collect();
        let (m, p) = masks::stack(&ms)?;
        let preds = rnn::predict(params, &big, &m, p)?;
        let last = preds.last().expect("nonempty sequence");
        let width = last.dims2().1;
        for s in 0..(end - start) {
            let mut v = Vec::with_capacity(rows * width);
            for r in 0..rows {
                v.extend_from_slice(last.row(s * rows + r));
            }
            out.push(v);
        }
        start = end;
    }
    Ok(out)
}
