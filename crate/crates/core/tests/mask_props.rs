use advdrop::cli::verify::{flip_violations, influence_map_error, random_instance};
use advdrop::masks::{
    self, adversarial_search, brute_force_adversarial, init_search_mask, sample_mask, search_from, AdvConfig,
    DropoutMask, InfluenceMap, InitPolicy, Scaling,
};
use advdrop::regularizers::{DistanceMetric, LambdaSchedule};
use advdrop::rnn::CellKind;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ones(h: usize) -> DropoutMask {
    DropoutMask::ones(h)
}

fn map(scores: Vec<f64>, at: &DropoutMask) -> InfluenceMap {
    InfluenceMap { scores, at: at.clone(), degenerate: false }
}

#[test]
fn hand_traced_flips() {
    let base = ones(4);
    let im = map(vec![0.5, -0.2, 0.1, -0.4], &base);
    assert_eq!(masks::flip(&base, &im, &base, 1).bits(), &[1, 1, 1, 0]);
    assert_eq!(masks::flip(&base, &im, &base, 2).bits(), &[1, 0, 1, 0]);
    // the positive raw score gives a negative flip score at a kept unit
    for budget in 0..=4 {
        assert_eq!(masks::flip(&base, &im, &base, budget).bits()[2], 1);
    }
    assert_eq!(masks::flip(&base, &im, &base, 0), base);
}

#[test]
fn ties_go_to_the_lower_index() {
    let base = ones(3);
    let im = map(vec![-1.0, -1.0, -1.0], &base);
    assert_eq!(masks::flip(&base, &im, &base, 1).bits(), &[0, 1, 1]);
    assert_eq!(masks::flip(&base, &im, &base, 2).bits(), &[0, 0, 1]);
}

#[test]
fn sample_mask_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (draws, h) = (1_000_000usize, 1000usize);
    let mut zeros = 0;
    for _ in 0..draws / h {
        zeros += sample_mask(0.1, h, &mut rng).unwrap().dropped();
    }
    let rate = zeros as f64 / draws as f64;
    assert!((rate - 0.1).abs() <= 1e-3, "zero rate {rate}");
}

#[test]
fn sample_mask_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(sample_mask(0.0, 50, &mut rng).unwrap().dropped(), 0);
    assert!(sample_mask(1.0, 5, &mut rng).is_err());
    assert!(sample_mask(-0.1, 5, &mut rng).is_err());
    assert!(sample_mask(0.999, 1000, &mut rng).unwrap().dropped() > 980);
    assert_eq!(sample_mask(0.3, 4, &mut rng).unwrap().scaling(), Scaling::Inverted);
}

#[test]
fn initial_flip_is_uniform() {
    // χ² with 9 degrees of freedom, 1% critical value
    const CRITICAL: f64 = 21.666;
    let h = 10;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = [0usize; 10];
    let base = ones(h);
    for _ in 0..n {
        let m = init_search_mask(&base, InitPolicy::SingleRandomFlip, &mut rng);
        assert_eq!(m.hamming(&base), 1);
        counts[m.bits().iter().position(|&b| b == 0).unwrap()] += 1;
    }
    let expected = n as f64 / h as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CRITICAL, "chi2 {chi2}, counts {counts:?}");
    assert_eq!(init_search_mask(&base, InitPolicy::Copy, &mut rng), base);
}

#[test]
fn budget_examples() {
    let cfg = AdvConfig::new(0.03, 2).unwrap();
    assert_eq!(cfg.budget(100), 3);
    assert_eq!(cfg.budget(10), 1);
    assert_eq!(cfg.stage_budget(0, 100), 1);
    assert_eq!(cfg.stage_budget(1, 100), 3);
    assert!(AdvConfig::new(0.0, 1).is_err());
    assert!(AdvConfig::new(0.5, 0).is_err());
}

#[test]
fn single_stage_is_one_map_and_one_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (params, batch) = random_instance(&mut rng, CellKind::Lstm, 6, 3, 2).unwrap();
    let cfg = AdvConfig::new(0.5, 1).unwrap();
    let base = vec![ones(6); 2];
    let lambda = LambdaSchedule::Uniform;
    let initial: Vec<DropoutMask> = base.iter().map(|b| init_search_mask(b, cfg.init, &mut rng)).collect();
    let trace = search_from(&params, &batch, &base, initial.clone(), &cfg, &lambda, DistanceMetric::JensenShannon).unwrap();
    let maps = masks::influence_map(&params, &batch, &base, &initial, &lambda, DistanceMetric::JensenShannon).unwrap();
    let manual: Vec<DropoutMask> =
        initial.iter().zip(&maps).zip(&base).map(|((s, im), b)| masks::flip(s, im, b, cfg.budget(6))).collect();
    assert_eq!(trace.final_masks(), manual.as_slice());
}

#[test]
fn dead_unit_scores_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut params, batch) = random_instance(&mut rng, CellKind::Rnn, 5, 4, 3).unwrap();
    let dead = 2;
    let h = params.hidden();
    for gate in &mut params.gates {
        let d = gate.u.data_mut();
        for j in 0..h {
            d[dead * h + j] = 0.0;
        }
    }
    let m = params.w_out.dims2().1;
    for j in 0..m {
        params.w_out.data_mut()[dead * m + j] = 0.0;
    }
    let base = vec![ones(h); 3];
    let search: Vec<DropoutMask> = base
        .iter()
        .map(|b| {
            let mut s = b.clone();
            s.toggle(0);
            s
        })
        .collect();
    for im in masks::influence_map(&params, &batch, &base, &search, &LambdaSchedule::Uniform, DistanceMetric::SquaredL2).unwrap() {
        assert_eq!(im.scores[dead], 0.0);
    }
}

#[test]
fn map_at_the_base_is_degenerate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (params, batch) = random_instance(&mut rng, CellKind::Lstm, 4, 3, 1).unwrap();
    let base = vec![ones(4)];
    let im = masks::influence_map(&params, &batch, &base, &base, &LambdaSchedule::FinalStep, DistanceMetric::JensenShannon).unwrap();
    assert!(im[0].degenerate);
    assert!(im[0].scores.iter().all(|&s| s == 0.0));
}

#[test]
fn brute_force_edge_budgets() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (params, batch) = random_instance(&mut rng, CellKind::Rnn, 5, 3, 1).unwrap();
    let base = ones(5);
    let (m, d) = brute_force_adversarial(&params, &batch, &base, 0, &LambdaSchedule::Uniform, DistanceMetric::SquaredL2).unwrap();
    assert_eq!((m, d), (base.clone(), 0.0));
    // full budget: the global maximum over all 2^H masks
    let (_, best) = brute_force_adversarial(&params, &batch, &base, 5, &LambdaSchedule::Uniform, DistanceMetric::SquaredL2).unwrap();
    let all = masks::feasible_masks(&base, 5).unwrap();
    assert_eq!(all.len(), 32);
    let values = masks::shared_mask_distances(&params, &batch, &base, &all, &LambdaSchedule::Uniform, DistanceMetric::SquaredL2).unwrap();
    assert_eq!(best, values.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    assert!(masks::feasible_masks(&ones(17), 1).is_err());
}

#[test]
fn wrong_sizes_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (params, batch) = random_instance(&mut rng, CellKind::Rnn, 4, 2, 2).unwrap();
    let cfg = AdvConfig::new(0.5, 2).unwrap();
    let lam = LambdaSchedule::FinalStep;
    assert!(masks::adversarial_mask(&params, &batch, &[ones(4)], &cfg, &lam, DistanceMetric::SquaredL2, &mut rng).is_err());
    assert!(masks::adversarial_mask(&params, &batch, &[ones(3), ones(3)], &cfg, &lam, DistanceMetric::SquaredL2, &mut rng).is_err());
    assert!(DropoutMask::new(vec![1, 2], 0.0, Scaling::None).is_err());
}

#[test]
fn stacked_masks_carry_scaling() {
    let m = sample_mask(0.5, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (t, p) = masks::stack(&[m.clone(), m]).unwrap();
    assert_eq!(t.shape(), &[2, 4]);
    assert_eq!(p, 0.5);
    let (_, p) = masks::stack(&[ones(4)]).unwrap();
    assert_eq!(p, 0.0);
}

fn metric(js: bool) -> DistanceMetric {
    if js {
        DistanceMetric::JensenShannon
    } else {
        DistanceMetric::SquaredL2
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn flip_rules_hold(scores in prop::collection::vec(-1.0..1.0f64, 1..12), seed in any::<u64>(), budget in 0usize..6) {
        let h = scores.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = sample_mask(0.3, h, &mut rng).unwrap();
        let search = init_search_mask(&base, InitPolicy::SingleRandomFlip, &mut rng);
        let budget = budget.max(search.hamming(&base));
        let out = masks::flip(&search, &map(scores.clone(), &search), &base, budget);
        let v = flip_violations(&search, &scores, &base, budget, &out);
        prop_assert!(v.is_empty(), "{:?}", v);
    }

    #[test]
    fn search_stays_in_budget_and_below_the_oracle(
        seed in any::<u64>(),
        hidden in 2usize..=8,
        steps in 2usize..=4,
        delta in 0.05..0.95f64,
        stages in 1usize..=3,
        lstm in any::<bool>(),
        js in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = if lstm { CellKind::Lstm } else { CellKind::Rnn };
        let (params, batch) = random_instance(&mut rng, kind, hidden, steps, 1).unwrap();
        let cfg = AdvConfig::new(delta, stages).unwrap();
        let base = vec![ones(hidden)];
        let lambda = LambdaSchedule::Uniform;
        let trace = adversarial_search(&params, &batch, &base, &cfg, &lambda, metric(js), &mut rng).unwrap();
        let budget = cfg.budget(hidden);
        for (k, stage) in trace.stages.iter().enumerate().skip(1) {
            prop_assert!(stage[0].hamming(&base[0]) <= cfg.stage_budget(k - 1, hidden));
        }
        // each stage is exactly one influence map and one flip from the last
        for (k, pair) in trace.stages.windows(2).enumerate() {
            let im = masks::influence_map(&params, &batch, &base, &pair[0], &lambda, metric(js)).unwrap();
            let replay = masks::flip(&pair[0][0], &im[0], &base[0], cfg.stage_budget(k, hidden));
            prop_assert_eq!(&replay, &pair[1][0], "stage {}", k);
        }
        let found = &trace.final_masks()[0];
        prop_assert!(found.hamming(&base[0]) <= budget);
        let (_, best) = brute_force_adversarial(&params, &batch, &base[0], budget, &lambda, metric(js)).unwrap();
        let got = masks::row_distances(&params, &batch, &base, trace.final_masks(), &lambda, metric(js)).unwrap()[0];
        prop_assert!(got <= best + 1e-12 * best.max(1.0));
    }

    #[test]
    fn influence_map_matches_differences(seed in any::<u64>(), hidden in 2usize..=6, js in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, batch) = random_instance(&mut rng, CellKind::Lstm, hidden, 3, 2).unwrap();
        let base = vec![ones(hidden); 2];
        let search: Vec<DropoutMask> = base.iter().map(|b| init_search_mask(b, InitPolicy::SingleRandomFlip, &mut rng)).collect();
        let err = influence_map_error(&params, &batch, &base, &search, &LambdaSchedule::Uniform, metric(js)).unwrap();
        prop_assert!(err <= 1e-3, "{}", err);
    }
}

/// Flips run both ways, so a later stage may restore a unit dropped earlier
/// and end closer to the base than the stage before it.
#[test]
fn a_later_stage_can_restore_a_unit() {
    let mut rng = ChaCha8Rng::seed_from_u64(11725770225698771706);
    let (params, batch) = random_instance(&mut rng, CellKind::Rnn, 7, 4, 1).unwrap();
    let cfg = AdvConfig::new(0.8403915587742926, 2).unwrap();
    let base = vec![ones(7)];
    let trace =
        adversarial_search(&params, &batch, &base, &cfg, &LambdaSchedule::Uniform, DistanceMetric::SquaredL2, &mut rng)
            .unwrap();
    let dists: Vec<usize> = trace.stages.iter().map(|s| s[0].hamming(&base[0])).collect();
    assert_eq!(dists, vec![1, 2, 1]);
    let (before, after) = (&trace.stages[1][0], &trace.stages[2][0]);
    assert!((0..7).any(|i| before.bits()[i] == 0 && after.bits()[i] == 1));
}
