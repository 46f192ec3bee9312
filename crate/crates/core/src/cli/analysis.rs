//! Accuracy of perturbed subnetworks and where the adversary drops units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::masks::{self, AdvConfig, DropoutMask, Scaling};
use crate::regularizers::{DistanceMetric, LambdaSchedule};
use crate::rnn::RnnParams;
use crate::training::accuracy_under;

/// Settings shared by the two analyses.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub adv: AdvConfig,
    pub lambda: LambdaSchedule,
    pub metric: DistanceMetric,
    pub seed: u64,
}

fn stream(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Bernoulli(p) keep/drop bits applied without rescaling, the same convention
/// as the searched masks.
pub fn random_subnetwork<R: rand::Rng + ?Sized>(p: f64, hidden: usize, rng: &mut R) -> Result<DropoutMask> {
    let m = masks::sample_mask(p, hidden, rng)?;
    DropoutMask::new(m.bits().to_vec(), 0.0, Scaling::None)
}

/// One row per mask draw: (accuracy under a random mask shared by the whole
/// set, accuracy under adversarial masks searched per example around the
/// full network). Draw `i` uses its own random stream, so the output does not
/// depend on the thread count.
pub fn histogram(
    params: &RnnParams,
    data: &SequenceDataset,
    n_masks: usize,
    p: f64,
    cfg: &AnalysisConfig,
) -> Result<Vec<(f64, f64)>> {
    if n_masks == 0 {
        return Err(Error::invalid("n-masks must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    cfg.adv.validate()?;
    let h = params.hidden();
    (0..n_masks)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, i);
            let shared = random_subnetwork(p, h, &mut rng)?;
            let random = accuracy_under(params, data, |b| Ok(vec![shared.clone(); b.batch_size()]))?;
            let adversarial = accuracy_under(params, data, |b| {
                let base = vec![DropoutMask::ones(h); b.batch_size()];
                masks::adversarial_mask(params, b, &base, &cfg.adv, &cfg.lambda, cfg.metric, &mut rng)
            })?;
            Ok((random, adversarial))
        })
        .collect()
}

/// Mean over `data` of each unit's bit in the adversarial mask found around
/// the full network.
pub fn mask_means(params: &RnnParams, data: &SequenceDataset, cfg: &AnalysisConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let h = params.hidden();
    let mut rng = stream(cfg.seed, 0);
    let mut sums = vec![0.0; h];
    for batch in data.batches(256) {
        let base = vec![DropoutMask::ones(h); batch.batch_size()];
        for m in masks::adversarial_mask(params, &batch, &base, &cfg.adv, &cfg.lambda, cfg.metric, &mut rng)? {
            for (s, &b) in sums.iter_mut().zip(m.bits()) {
                *s += b as f64;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / data.len() as f64).collect())
}
