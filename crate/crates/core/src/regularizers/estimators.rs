//! Monte Carlo estimates of the regularizer values.
//!
//! Each sample draws one mask (or pair of masks) shared by every row of the
//! batch and contributes the row-averaged weighted distance. Samples are
//! evaluated sequentially in fixed-size chunks, so a given generator state
//! always yields the same estimate.

use rand::Rng;

use super::{sequence_distance_rows, DistanceMetric, LambdaSchedule};
use crate::error::{Error, Result};
use crate::masks::{self, AdvConfig, BaseMaskPolicy, DropoutMask};
use crate::rnn::{self, RnnParams, SequenceBatch};

/// Rows per forward pass when many masks are evaluated at once.
const CHUNK_ROWS: usize = 4096;

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("estimate needs at least one sample"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_err = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Ok(Estimate { mean, std_err, samples: values.len() })
    }

    pub fn scaled(self, c: f64) -> Self {
        Estimate { mean: self.mean * c, std_err: self.std_err * c.abs(), samples: self.samples }
    }
}

/// For each `s`, the row-averaged weighted distance between the network
/// under `a[s]` and under `b[s]`, each mask shared by all rows.
pub fn paired_mask_distances(
    params: &RnnParams,
    batch: &SequenceBatch,
    a: &[DropoutMask],
    b: &[DropoutMask],
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid("mask lists differ in length"));
    }
    let rows = batch.batch_size();
    let per_chunk = (CHUNK_ROWS / rows).max(1);
    let mut out = Vec::with_capacity(a.len());
    for (ca, cb) in a.chunks(per_chunk).zip(b.chunks(per_chunk)) {
        let idx: Vec<usize> = (0..ca.len()).flat_map(|_| 0..rows).collect();
        let big = batch.select(&idx);
        let pa = predict_shared(params, &big, ca, rows)?;
        let pb = predict_shared(params, &big, cb, rows)?;
        let d = sequence_distance_rows(&pa, &pb, lambda, metric)?;
        out.extend(d.chunks(rows).map(|c| c.iter().sum::<f64>() / rows as f64));
    }
    Ok(out)
}

fn predict_shared(
    params: &RnnParams,
    big: &SequenceBatch,
    masks: &[DropoutMask],
    rows: usize,
) -> Result<Vec<crate::tensor::Tensor>> {
    let expanded: Vec<DropoutMask> =
        masks.iter().flat_map(|m| std::iter::repeat_n(m.clone(), rows)).collect();
    let (m, p) = masks::stack(&expanded)?;
    rnn::predict(params, big, &m, p)
}

fn check_samples(samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    Ok(())
}

/// Expected distance between the full network and a randomly masked one.
pub fn el_regularizer<R: Rng + ?Sized>(
    params: &RnnParams,
    batch: &SequenceBatch,
    p: f64,
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    check_samples(samples)?;
    let h = params.hidden();
    let full = vec![DropoutMask::ones(h); samples];
    let drawn = (0..samples).map(|_| masks::sample_mask(p, h, rng)).collect::<Result<Vec<_>>>()?;
    Estimate::from_values(&paired_mask_distances(params, batch, &full, &drawn, lambda, metric)?)
}

/// Expected distance between two independently masked copies.
pub fn fd_regularizer<R: Rng + ?Sized>(
    params: &RnnParams,
    batch: &SequenceBatch,
    p: f64,
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    check_samples(samples)?;
    let h = params.hidden();
    let mut first = Vec::with_capacity(samples);
    let mut second = Vec::with_capacity(samples);
    for _ in 0..samples {
        first.push(masks::sample_mask(p, h, rng)?);
        second.push(masks::sample_mask(p, h, rng)?);
    }
    Estimate::from_values(&paired_mask_distances(params, batch, &first, &second, lambda, metric)?)
}

/// Outcome of one adversarial regularizer evaluation.
#[derive(Clone, Debug)]
pub struct AdversarialEval {
    /// Row-averaged weighted distance between base and adversarial networks.
    pub value: f64,
    pub per_row: Vec<f64>,
    pub base: Vec<DropoutMask>,
    pub adversarial: Vec<DropoutMask>,
}

/// Value of the adversarial regularizer on `batch`, searching one mask per row.
pub fn add_regularizer<R: Rng + ?Sized>(
    params: &RnnParams,
    batch: &SequenceBatch,
    policy: BaseMaskPolicy,
    p: f64,
    cfg: &AdvConfig,
    lambda: &LambdaSchedule,
    metric: DistanceMetric,
    rng: &mut R,
) -> Result<AdversarialEval> {
    let base = masks::base_masks(policy, p, params.hidden(), batch.batch_size(), rng)?;
    let adversarial = masks::adversarial_mask(params, batch, &base, cfg, lambda, metric, rng)?;
    let per_row = masks::row_distances(params, batch, &base, &adversarial, lambda, metric)?;
    let value = per_row.iter().sum::<f64>() / per_row.len() as f64;
    Ok(AdversarialEval { value, per_row, base, adversarial })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnn::{CellKind, Targets};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (RnnParams, SequenceBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = RnnParams::init(CellKind::Lstm, 2, 6, 3, &mut rng).unwrap();
        let inputs = (0..4)
            .map(|_| Tensor::matrix(2, 2, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        (params, SequenceBatch::new(inputs, Targets::Final(vec![0, 2])).unwrap())
    }

    #[test]
    fn zero_dropout_gives_zero() {
        let (params, batch) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for metric in [DistanceMetric::SquaredL2, DistanceMetric::JensenShannon] {
            let el = el_regularizer(&params, &batch, 0.0, &LambdaSchedule::Uniform, metric, 20, &mut rng).unwrap();
            let fd = fd_regularizer(&params, &batch, 0.0, &LambdaSchedule::Uniform, metric, 20, &mut rng).unwrap();
            assert_eq!((el.mean, fd.mean), (0.0, 0.0));
        }
    }

    #[test]
    fn estimates_are_nonnegative() {
        let (params, batch) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let el = el_regularizer(&params, &batch, 0.3, &LambdaSchedule::FinalStep, DistanceMetric::JensenShannon, 50, &mut rng)
            .unwrap();
        assert!(el.mean > 0.0 && el.std_err > 0.0);
        assert!(el_regularizer(&params, &batch, 0.3, &LambdaSchedule::FinalStep, DistanceMetric::SquaredL2, 0, &mut rng)
            .is_err());
    }

    #[test]
    fn zero_output_weights_give_zero_adversarial_value() {
        let (mut params, batch) = setup(5);
        params.w_out = Tensor::zeros(params.w_out.shape().to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = AdvConfig::new(0.1, 2).unwrap();
        let out = add_regularizer(
            &params,
            &batch,
            BaseMaskPolicy::Expected,
            0.0,
            &cfg,
            &LambdaSchedule::Uniform,
            DistanceMetric::SquaredL2,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.adversarial.iter().all(|m| m.hamming(&DropoutMask::ones(6)) <= 1));
    }

    #[test]
    fn estimate_statistics() {
        let e = Estimate::from_values(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(e.mean, 2.5);
        assert!((e.std_err - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert!(Estimate::from_values(&[]).is_err());
    }
}
