use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Module;

fn random_segment(rng: &mut ChaCha8Rng, len: usize) -> TrajectorySegment {
    let mut channels = BTreeMap::new();
    channels.insert(
        "base_linear_velocity".to_string(),
        (0..len)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..2.0)).collect())
            .collect(),
    );
    channels.insert(
        "commands".to_string(),
        (0..len).map(|_| vec![rng.random_range(0.5..2.0)]).collect(),
    );
    channels.insert(
        "feet_contacts".to_string(),
        (0..len)
            .map(|_| (0..4).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect())
            .collect(),
    );
    let actions = (0..len)
        .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    TrajectorySegment::new(channels, actions, 0, 0).unwrap()
}

fn config(mode: RewardMode, blocks: usize, width: usize) -> PredictorConfig {
    PredictorConfig {
        mode,
        width,
        heads: 2,
        blocks,
        input_dim: 8,
        ..PredictorConfig::default()
    }
}

fn randomize(p: &mut RewardPredictor, rng: &mut ChaCha8Rng, scale: f64) {
    p.visit_params_mut(&mut |param| {
        for v in param.value_mut().data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    });
}

fn predictor(mode: RewardMode, seed: u64) -> RewardPredictor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = RewardPredictor::new(config(mode, 2, 16), FeatureStats::identity(8), &mut rng).unwrap();
    randomize(&mut p, &mut rng, 0.4);
    p
}

#[test]
fn bt_probability_examples() {
    assert_eq!(bt_probability(0.0, 0.0), 0.5);
    assert_abs_diff_eq!(bt_probability(2f64.ln(), 0.0), 2.0 / 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(bt_probability(1.0, -1.0), 0.880_797_077_977_882_3, epsilon = 1e-12);
    assert_eq!(bt_probability(1e6, -1e6), 1.0);
    assert_eq!(bt_probability(-1e6, 1e6), 0.0);
}

#[test]
fn adjust_probability_examples() {
    assert_eq!(adjust_probability(1.0, 0.15).unwrap(), 0.925);
    assert_eq!(adjust_probability(0.5, 0.15).unwrap(), 0.5);
    assert_eq!(adjust_probability(0.0, 0.15).unwrap(), 0.075);
    assert!(matches!(
        adjust_probability(0.5, 0.5),
        Err(PreferenceError::InvalidNoiseRate(_))
    ));
    assert!(adjust_probability(1.2, 0.1).is_err());
}

#[test]
fn pair_loss_examples() {
    let ln2 = 2f64.ln();
    for y in [0.0, 0.5, 1.0] {
        assert_abs_diff_eq!(pair_loss(0.0, 0.0, y, 0.15).unwrap(), ln2, epsilon = 1e-15);
    }
    assert_abs_diff_eq!(pair_loss(1e3, 0.0, 0.0, 0.15).unwrap(), -(0.925f64.ln()), epsilon = 1e-12);
    assert_abs_diff_eq!(-(0.925f64.ln()), 0.077_961_541_469_711_6, epsilon = 1e-12);
    // y = 0.5: d/dgap of the loss vanishes at gap 0 (p' = 0.5 is the minimizer).
    let h = 1e-6;
    let slope = (pair_loss(h, 0.0, 0.5, 0.15).unwrap() - pair_loss(-h, 0.0, 0.5, 0.15).unwrap()) / (2.0 * h);
    assert!(slope.abs() < 1e-9, "{slope}");
    assert!(pair_loss(0.3, 0.0, 0.5, 0.15).unwrap() > ln2);
    assert!(pair_loss(-0.3, 0.0, 0.5, 0.15).unwrap() > ln2);
}

proptest! {
    #[test]
    fn bt_probability_is_complementary(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        prop_assert!((bt_probability(a, b) + bt_probability(b, a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn bt_probability_is_shift_invariant(a in -20.0f64..20.0, b in -20.0f64..20.0, c in -100.0f64..100.0) {
        prop_assert!((bt_probability(a + c, b + c) - bt_probability(a, b)).abs() <= 1e-9);
    }

    #[test]
    fn adjusted_loss_has_noise_floor(a in -60.0f64..60.0, b in -60.0f64..60.0, eps in 0.0f64..0.45, yi in 0usize..3) {
        let y = [0.0, 0.5, 1.0][yi];
        let p = adjust_probability(bt_probability(a, b), eps).unwrap();
        prop_assert!(p >= eps / 2.0 - 1e-15 && p <= 1.0 - eps / 2.0 + 1e-15);
        prop_assert!((adjust_probability(bt_probability(b, a), eps).unwrap() - (1.0 - p)).abs() < 1e-12);
        let floor = -(1.0 - eps / 2.0).ln();
        prop_assert!(pair_loss(a, b, y, eps).unwrap() >= floor - 1e-12);
    }
}

#[test]
fn markovian_rewards_are_local() {
    let p = predictor(RewardMode::Markovian, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_segment(&mut rng, 12);
    let mut channels = a.channels().clone();
    channels.get_mut("commands").unwrap()[5][0] += 0.7;
    let b = TrajectorySegment::new(channels, a.actions().to_vec(), 0, 0).unwrap();
    let (ra, rb) = (p.predict_step_rewards(&a).unwrap(), p.predict_step_rewards(&b).unwrap());
    for t in 0..12 {
        if t == 5 {
            assert_ne!(ra[t], rb[t]);
        } else {
            assert_eq!(ra[t], rb[t], "step {t}");
        }
    }
}

#[test]
fn non_markovian_rewards_are_causal() {
    let p = predictor(RewardMode::NonMarkovian, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_segment(&mut rng, 16);
    let mut channels = a.channels().clone();
    channels.get_mut("base_linear_velocity").unwrap()[10][0] -= 1.0;
    let b = TrajectorySegment::new(channels, a.actions().to_vec(), 0, 0).unwrap();
    let (ra, rb) = (p.predict_step_rewards(&a).unwrap(), p.predict_step_rewards(&b).unwrap());
    assert_eq!(ra[..10], rb[..10]);
    assert_ne!(ra[10], rb[10]);
    // Step 12 still sees step 10 inside its 8-step window.
    assert_ne!(ra[12], rb[12]);
}

#[test]
fn fresh_predictor_outputs_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in [RewardMode::Markovian, RewardMode::NonMarkovian] {
        let p = RewardPredictor::new(config(mode, 2, 16), FeatureStats::identity(8), &mut rng).unwrap();
        let seg = random_segment(&mut rng, 24);
        assert!(p.predict_step_rewards(&seg).unwrap().iter().all(|&r| r == 0.0));
    }
}

#[test]
fn feature_dimension_mismatch_is_an_error() {
    let p = predictor(RewardMode::Markovian, 5);
    let mut channels = BTreeMap::new();
    channels.insert("commands".to_string(), vec![vec![1.0]; 4]);
    let seg = TrajectorySegment::new(channels, vec![], 0, 0).unwrap();
    assert_eq!(
        p.predict_step_rewards(&seg).unwrap_err(),
        PreferenceError::FeatureDim { expected: 8, found: 1 }
    );
}

#[test]
fn markovian_predictor_is_permutation_consistent() {
    let p = predictor(RewardMode::Markovian, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seg = random_segment(&mut rng, 10);
    let perm: Vec<usize> = vec![3, 1, 4, 0, 9, 2, 6, 5, 8, 7];
    let channels = seg
        .channels()
        .iter()
        .map(|(k, rows)| (k.clone(), perm.iter().map(|&i| rows[i].clone()).collect()))
        .collect();
    let actions = perm.iter().map(|&i| seg.actions()[i].clone()).collect();
    let permuted = TrajectorySegment::new(channels, actions, 0, 0).unwrap();
    let r = p.predict_step_rewards(&seg).unwrap();
    let rp = p.predict_step_rewards(&permuted).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(rp[j], r[i]);
    }
}

#[test]
fn live_windows_match_segment_scoring() {
    let p = predictor(RewardMode::NonMarkovian, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seg = random_segment(&mut rng, 12);
    let features = seg.features(false);
    let windows: Vec<&[Vec<f64>]> = (0..12).map(|t| &features[..=t]).collect();
    let live = p.predict_windows(&windows).unwrap();
    let batch = p.predict_step_rewards(&seg).unwrap();
    for (a, b) in live.iter().zip(&batch) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn zero_predictor_loss_is_ln2_and_empty_batch_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = RewardPredictor::new(config(RewardMode::NonMarkovian, 1, 8), FeatureStats::identity(8), &mut rng).unwrap();
    let triples: Vec<PreferenceTriple> = (0..4)
        .map(|i| {
            PreferenceTriple::new(random_segment(&mut rng, 6), random_segment(&mut rng, 6), [0.0, 0.5, 1.0][i % 3]).unwrap()
        })
        .collect();
    let refs: Vec<&PreferenceTriple> = triples.iter().collect();
    let mut tape = Tape::new();
    let loss = preference_loss(&mut tape, &p, &refs, 0.15).unwrap();
    assert_abs_diff_eq!(tape.value(loss).item().unwrap(), 2f64.ln(), epsilon = 1e-12);
    assert_eq!(preference_loss(&mut tape, &p, &[], 0.15).unwrap_err(), PreferenceError::EmptyBatch);
}

#[test]
fn tape_loss_matches_scalar_loss() {
    let p = predictor(RewardMode::NonMarkovian, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let triples: Vec<PreferenceTriple> = (0..5)
        .map(|i| {
            PreferenceTriple::new(random_segment(&mut rng, 9), random_segment(&mut rng, 9), [0.0, 0.5, 1.0][i % 3]).unwrap()
        })
        .collect();
    let refs: Vec<&PreferenceTriple> = triples.iter().collect();
    let mut tape = Tape::new();
    let loss = preference_loss(&mut tape, &p, &refs, 0.15).unwrap();
    let pairs: Vec<_> = triples
        .iter()
        .map(|t| {
            (
                p.predict_step_rewards(&t.segment_a).unwrap(),
                p.predict_step_rewards(&t.segment_b).unwrap(),
                t.label(),
            )
        })
        .collect();
    assert_abs_diff_eq!(tape.value(loss).item().unwrap(), loss_from_rewards(&pairs, 0.15).unwrap(), epsilon = 1e-12);
}

#[test]
fn mlp_variant_must_be_markovian() {
    let cfg = PredictorConfig {
        mode: RewardMode::NonMarkovian,
        architecture: PredictorArch::Mlp,
        input_dim: 8,
        ..PredictorConfig::default()
    };
    assert!(cfg.validate().is_err());
    let cfg = PredictorConfig {
        context_length: 8,
        input_dim: 8,
        ..PredictorConfig::default()
    };
    assert!(cfg.validate().is_err());
}
