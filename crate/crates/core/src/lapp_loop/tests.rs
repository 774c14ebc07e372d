use std::cell::Cell;

use proptest::prelude::*;

use super::*;
use crate::annotation::{
    AnnotationError, Annotator, AnnotatorConfig, PairLabeler, RawLabel, SegmentPair,
};
use crate::envs::EnvConfig;
use crate::io::RunConfig;
use crate::numerics::Module;
use crate::preference::{PredictorConfig, TrajectorySegment};
use crate::rl::{collect_rollout, PPOConfig, PolicyBundle, VecEnv};
use crate::seeding::rng_from_seed;
use crate::trainer::TrainerConfig;

fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        env: EnvConfig::point_mass(),
        predictor: PredictorConfig {
            width: 8,
            heads: 2,
            blocks: 1,
            ..PredictorConfig::default()
        },
        trainer: TrainerConfig {
            pool_size: 2,
            selected: 1,
            min_epochs: 1,
            max_epochs: 2,
            learning_rate: 1e-3,
            ..TrainerConfig::default()
        },
        ppo: PPOConfig {
            hidden: vec![8],
            ..PPOConfig::default()
        },
        run: LoopConfig {
            epochs: 6,
            update_interval: 2,
            pairs_per_epoch: 5,
            num_envs: 3,
            steps_per_epoch: 20,
            dataset_size: 20,
            segment_len: 6,
            ..LoopConfig::default()
        },
        ..RunConfig::default()
    }
}

fn oracle() -> Annotator {
    Annotator::from_config(&AnnotatorConfig::default()).unwrap()
}

struct Fixed(u8);

impl PairLabeler for Fixed {
    fn annotate(&self, pairs: &[SegmentPair], _stage: usize) -> Result<Vec<RawLabel>, AnnotationError> {
        Ok(vec![RawLabel::new(self.0 as i64)?; pairs.len()])
    }
}

struct Failing(Cell<usize>);

impl PairLabeler for Failing {
    fn annotate(&self, _pairs: &[SegmentPair], _stage: usize) -> Result<Vec<RawLabel>, AnnotationError> {
        self.0.set(self.0.get() + 1);
        Err(AnnotationError::Unreachable {
            attempts: 1,
            message: "stub".into(),
        })
    }
}

fn rollout(env: &EnvConfig, envs: usize, steps: usize, seed: u64) -> crate::rl::RolloutBuffer {
    let cfg = PPOConfig {
        hidden: vec![8],
        ..PPOConfig::default()
    };
    let e = crate::envs::Env::new(env.clone());
    let mut b = PolicyBundle::new(e.observation_dim(), e.action_dim(), &cfg, &mut rng_from_seed(seed)).unwrap();
    let mut v = VecEnv::new(env, envs, seed);
    collect_rollout(&mut b, &mut v, None, steps, &cfg, &mut rng_from_seed(seed + 1)).unwrap()
}

#[test]
fn two_rollouts_one_pair() {
    let buf = rollout(&EnvConfig::point_mass(), 2, 30, 1);
    let pairs = sample_pairs(&buf, 1, 8, &mut rng_from_seed(0)).unwrap();
    assert_eq!(pairs.len(), 1);
    let mut eps = [pairs[0].segment_a.episode(), pairs[0].segment_b.episode()];
    eps.sort();
    assert_eq!(eps, [0, 1]);
}

#[test]
fn pair_sampling_is_seeded_and_well_formed() {
    let env = EnvConfig {
        episode_length: 11,
        ..EnvConfig::default()
    };
    let buf = rollout(&env, 4, 40, 2);
    let a = sample_pairs(&buf, 30, 6, &mut rng_from_seed(5)).unwrap();
    let b = sample_pairs(&buf, 30, 6, &mut rng_from_seed(5)).unwrap();
    assert_eq!(a, b);
    let check = |s: &TrajectorySegment| {
        assert_eq!(s.len(), 6);
        assert_eq!(s.channels().len(), 6);
        // never straddles an episode end
        assert!(s.start() + 6 <= 11);
    };
    for p in &a {
        check(&p.segment_a);
        check(&p.segment_b);
        assert_ne!(p.segment_a.episode(), p.segment_b.episode());
    }
}

#[test]
fn short_rollouts_are_rejected() {
    let buf = rollout(&EnvConfig::point_mass(), 3, 5, 1);
    assert!(matches!(sample_pairs(&buf, 1, 6, &mut rng_from_seed(0)), Err(LoopError::TooShort(_))));
    let one = rollout(&EnvConfig::point_mass(), 1, 10, 1);
    assert!(matches!(sample_pairs(&one, 1, 6, &mut rng_from_seed(0)), Err(LoopError::TooShort(_))));
}

fn triple(tag: f64) -> PreferenceTriple {
    let seg = |v: f64| {
        TrajectorySegment::new([("x".to_string(), vec![vec![v]; 2])].into_iter().collect(), Vec::new(), 0, 0).unwrap()
    };
    PreferenceTriple::new(seg(tag), seg(-tag), 0.0).unwrap()
}

fn tag(t: &PreferenceTriple) -> f64 {
    t.segment_a.channel("x").unwrap()[0][0]
}

#[test]
fn window_evicts_oldest_first() {
    let mut d = SlidingDataset::new(500);
    assert_eq!(d.extend((0..500).map(|i| triple(i as f64))), 0);
    assert_eq!(d.extend((500..750).map(|i| triple(i as f64))), 250);
    assert_eq!(d.len(), 500);
    let tags: Vec<f64> = d.iter().map(tag).collect();
    assert_eq!(tags, (250..750).map(|i| i as f64).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn window_holds_the_latest(cap in 1usize..30, batches in prop::collection::vec(0usize..20, 1..8)) {
        let mut d = SlidingDataset::new(cap);
        let mut all = Vec::new();
        let mut next = 0.0;
        for n in batches {
            let batch: Vec<PreferenceTriple> = (0..n).map(|_| { next += 1.0; triple(next) }).collect();
            all.extend(batch.iter().map(tag));
            d.extend(batch);
            prop_assert!(d.len() <= cap);
            let want = &all[all.len().saturating_sub(cap)..];
            let got: Vec<f64> = d.iter().map(tag).collect();
            prop_assert_eq!(got.as_slice(), want);
        }
    }
}

#[test]
fn buffer_respects_capacity() {
    let buf = rollout(&EnvConfig::point_mass(), 2, 10, 1);
    let pairs = sample_pairs(&buf, 4, 3, &mut rng_from_seed(0)).unwrap();
    let mut b = PreferenceBuffer::new(6);
    assert_eq!(b.push(pairs.clone()), 4);
    assert_eq!(b.push(pairs), 2);
    assert!(b.is_full());
    assert_eq!(b.take().len(), 6);
    assert!(b.is_empty());
}

#[test]
fn pool_resampling() {
    let pool: Vec<PreferenceTriple> = (0..50).map(|i| triple(i as f64)).collect();
    let a = resample_pool(&pool, 20, &mut rng_from_seed(1));
    assert_eq!(a.len(), 20);
    assert_eq!(a, resample_pool(&pool, 20, &mut rng_from_seed(1)));
    assert_eq!(resample_pool(&pool[..10], 20, &mut rng_from_seed(1)).len(), 10);
}

#[test]
fn loop_config_checks() {
    assert!(LoopConfig::default().validate().is_ok());
    assert_eq!(LoopConfig::default().buffer_capacity(), 500);
    let small = LoopConfig {
        dataset_size: 100,
        ..LoopConfig::default()
    };
    assert!(small.validate().is_err());
    let one_env = LoopConfig {
        num_envs: 1,
        ..LoopConfig::default()
    };
    assert!(one_env.validate().is_err());
}

#[test]
fn oracle_bootstrap_fills_the_dataset() {
    let mut s = LoopState::new(tiny_config(3)).unwrap();
    let before = s.bundle.clone();
    let report = s.bootstrap(&oracle()).unwrap();
    assert_eq!(s.dataset.len(), 20);
    let t = report.tally.unwrap();
    assert_eq!(t.labeled + t.discarded, t.annotated);
    assert_eq!(t.labeled, 20);
    assert!(s.predictor.is_some());
    assert_eq!(s.bundle.obs_norm, before.obs_norm);
    assert_eq!(s.epoch, 0);
}

#[test]
fn bootstrap_gives_up_on_incomparable_labels() {
    let mut s = LoopState::new(tiny_config(3)).unwrap();
    match s.bootstrap(&Fixed(3)) {
        Err(LoopError::BootstrapExhausted { attempts, collected, .. }) => {
            assert_eq!(attempts, 20);
            assert_eq!(collected, 0);
        }
        other => panic!("expected exhaustion, got {other:?}"),
    }
    assert!(s.predictor.is_none());
}

#[test]
fn bootstrap_reports_partial_data_on_annotator_failure() {
    let mut s = LoopState::new(tiny_config(3)).unwrap();
    assert!(matches!(
        s.bootstrap(&Failing(Cell::new(0))),
        Err(LoopError::BootstrapAnnotation { .. })
    ));
}

#[test]
fn refresh_schedule_and_counting() {
    let mut s = LoopState::new(tiny_config(4)).unwrap();
    s.bootstrap(&oracle()).unwrap();
    let first = s.dataset.to_vec();
    let r0 = s.run_epoch(Some(&oracle())).unwrap();
    // epoch 0 is not a refresh epoch
    assert_eq!(r0.predictor_updated, Some(false));
    assert_eq!(s.dataset.to_vec(), first);
    assert_eq!(s.buffer.len(), 5);
    let r1 = s.run_epoch(Some(&oracle())).unwrap();
    assert_eq!(r1.buffer_pairs, Some(10));
    assert_eq!(r1.predictor_updated, Some(true));
    assert_eq!(r1.annotated, Some(10));
    assert_eq!(r1.labeled.unwrap() + r1.discarded.unwrap(), 10);
    assert!(s.buffer.is_empty());
    assert_eq!(s.dataset.len(), 20);
    // the newest labeled triples sit at the end
    assert_ne!(s.dataset.to_vec()[19], first[19]);
}

#[test]
fn refresh_swaps_predictor_but_not_policy() {
    let mut s = LoopState::new(tiny_config(5)).unwrap();
    s.bootstrap(&oracle()).unwrap();
    s.run_epoch(Some(&oracle())).unwrap();
    let old = s.predictor.clone().unwrap();
    let policy = s.bundle.clone();
    let report = s.update_predictor_cycle(&oracle());
    assert!(report.retrained);
    let mut a = Vec::new();
    old.members()[0].visit_params(&mut |p| a.push(p.value().clone()));
    let mut b = Vec::new();
    s.predictor.as_ref().unwrap().members()[0].visit_params(&mut |p| b.push(p.value().clone()));
    assert_ne!(a, b);
    let mut pa = Vec::new();
    policy.net.visit_params(&mut |p| pa.push(p.value().clone()));
    let mut pb = Vec::new();
    s.bundle.net.visit_params(&mut |p| pb.push(p.value().clone()));
    assert_eq!(pa, pb);
}

#[test]
fn failed_annotation_keeps_the_predictor() {
    let mut s = LoopState::new(tiny_config(6)).unwrap();
    s.bootstrap(&oracle()).unwrap();
    let before = s.predictor.clone().unwrap().validation_losses().to_vec();
    let failing = Failing(Cell::new(0));
    s.run_epoch(Some(&failing)).unwrap();
    let row = s.run_epoch(Some(&failing)).unwrap();
    assert_eq!(failing.0.get(), 1);
    assert_eq!(row.predictor_updated, Some(false));
    assert_eq!(s.predictor.unwrap().validation_losses(), before.as_slice());
    assert!(s.buffer.is_empty());
}

#[test]
fn full_process_pool_grows_by_at_most_a_buffer() {
    let mut cfg = tiny_config(7);
    cfg.run.window = DatasetWindow::FullProcess;
    let mut s = LoopState::new(cfg).unwrap();
    s.bootstrap(&oracle()).unwrap();
    let mut last = s.pool.len();
    assert_eq!(last, 20);
    for _ in 0..4 {
        let row = s.run_epoch(Some(&oracle())).unwrap();
        assert!(s.pool.len() - last <= 10);
        assert_eq!(row.dataset_size, Some(s.pool.len()));
        last = s.pool.len();
    }
    assert!(last > 20);
    assert_eq!(s.training_set(9).len(), 20);
}

#[test]
fn zero_beta_matches_the_baseline() {
    let mut base_cfg = tiny_config(8);
    base_cfg.run.baseline = true;
    let mut lapp_cfg = tiny_config(8);
    lapp_cfg.ppo.beta = 0.0;
    let mut base = LoopState::new(base_cfg).unwrap();
    let mut lapp = LoopState::new(lapp_cfg).unwrap();
    lapp.bootstrap(&oracle()).unwrap();
    for _ in 0..4 {
        let a = base.run_epoch(None).unwrap();
        let b = lapp.run_epoch(Some(&oracle())).unwrap();
        assert_eq!(serde_json::to_string(&a.policy).unwrap(), serde_json::to_string(&b.policy).unwrap());
        assert!(a.mean_pref_reward.is_none());
        assert!(b.mean_pref_reward.is_some());
    }
}

#[test]
fn missing_predictor_is_an_error() {
    let mut s = LoopState::new(tiny_config(1)).unwrap();
    assert!(matches!(s.run_epoch(Some(&oracle())), Err(LoopError::Mismatch(_))));
}

#[test]
fn policy_from_another_env_is_rejected() {
    let gait = tiny_config(1);
    let s = LoopState::new(RunConfig {
        env: EnvConfig::default(),
        ..gait.clone()
    })
    .unwrap();
    assert!(matches!(LoopState::with_bundle(gait, s.bundle), Err(LoopError::Mismatch(_))));
}
