use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::preference::TrajectorySegment;

fn contacts_segment(rows: Vec<Vec<f64>>) -> TrajectorySegment {
    let mut channels = BTreeMap::new();
    channels.insert(CONTACT_CHANNEL.to_string(), rows);
    TrajectorySegment::new(channels, vec![], 0, 0).unwrap()
}

#[test]
fn reset_is_seeded() {
    let mut a = Env::new(EnvConfig::default());
    let mut b = Env::new(EnvConfig::default());
    assert_eq!(a.reset(7), b.reset(7));
    let c1 = a.command();
    b.reset(8);
    assert_ne!(c1, b.command());
    assert!((0.5..=2.0).contains(&c1));
}

#[test]
fn initial_contacts_follow_phases() {
    let mut e = GaitWalker::new(EnvConfig::default());
    for seed in 0..20 {
        e.reset(seed);
        let expected = e.phases().map(|p| if p < 0.6 { 1.0 } else { 0.0 });
        assert_eq!(e.contacts(), expected);
        assert_eq!(e.channels()["feet_contacts"], expected.to_vec());
    }
}

#[test]
fn zero_action_from_rest_keeps_velocity() {
    let mut e = Env::new(EnvConfig::default());
    e.reset(3);
    let c = e.command();
    let r = e.step(&[0.0; 5]).unwrap();
    assert_eq!(e.velocity(), 0.0);
    assert_abs_diff_eq!(r.reward, (-c * c / 0.25).exp(), epsilon = 1e-15);
}

#[test]
fn matched_velocity_gives_unit_reward() {
    let mut e = GaitWalker::new(EnvConfig {
        drag: 0.0,
        ..EnvConfig::default()
    });
    e.reset(0);
    let mut s = e.save_state();
    s[1] = s[0];
    e.load_state(&s).unwrap();
    let r = e.step(&[0.0; 5]);
    assert_eq!(r.reward, 1.0);
}

#[test]
fn phase_integrates_rate() {
    let cfg = EnvConfig::default();
    let mut e = GaitWalker::new(cfg);
    e.reset(1);
    let start = e.phases();
    // A rate of 2 Hz is an offset of -0.5 from the default 2.5 Hz.
    for _ in 0..10 {
        e.step(&[0.0, -0.5, -0.5, -0.5, -0.5]);
    }
    for (a, b) in start.iter().zip(e.phases()) {
        let advanced = (b - a).rem_euclid(1.0);
        assert!(advanced < 1e-9 || (1.0 - advanced) < 1e-9, "{advanced}");
    }
    assert_eq!(e.phase_rate(10.0), 5.0);
    assert_eq!(e.phase_rate(-10.0), 0.5);
}

#[test]
fn episode_ends_at_horizon_and_rejects_bad_actions() {
    let mut e = Env::new(EnvConfig {
        episode_length: 3,
        ..EnvConfig::default()
    });
    e.reset(0);
    assert!(!e.step(&[0.1; 5]).unwrap().done);
    assert!(!e.step(&[0.1; 5]).unwrap().done);
    assert!(e.step(&[0.1; 5]).unwrap().done);
    assert_eq!(e.step(&[0.1; 2]).unwrap_err(), EnvError::ActionDim { expected: 5, found: 2 });
    assert_eq!(e.step(&[f64::NAN; 5]).unwrap_err(), EnvError::NonFiniteAction);
}

#[test]
fn point_mass_contract() {
    let mut e = Env::new(EnvConfig::point_mass());
    let obs = e.reset(4);
    assert_eq!(obs.len(), 2);
    let mut s = e.save_state();
    s[1] = s[0];
    e.load_state(&s).unwrap();
    e.set_drag(0.0);
    assert_eq!(e.step(&[0.0]).unwrap().reward, 1.0);
    e.set_drag(0.5);
    let v = e.velocity();
    e.step(&[0.0]).unwrap();
    assert!(e.velocity() < v);

    let mut a = Env::new(EnvConfig::point_mass());
    let mut b = Env::new(EnvConfig::point_mass());
    a.reset(11);
    b.reset(11);
    for k in 0..30 {
        let act = [((k as f64) * 0.37).sin()];
        assert_eq!(a.step(&act).unwrap(), b.step(&act).unwrap());
    }
}

#[test]
fn gait_trajectories_are_deterministic_and_restorable() {
    let mut a = Env::new(EnvConfig::default());
    let mut b = Env::new(EnvConfig::default());
    a.reset(5);
    b.reset(5);
    let act = |k: usize| [0.3, (k as f64).sin(), 0.2, -0.4, (k as f64 * 0.5).cos()];
    for k in 0..17 {
        assert_eq!(a.step(&act(k)).unwrap(), b.step(&act(k)).unwrap());
    }
    let saved = a.save_state();
    let expected: Vec<_> = (17..40).map(|k| a.step(&act(k)).unwrap()).collect();
    b.load_state(&saved).unwrap();
    let replay: Vec<_> = (17..40).map(|k| b.step(&act(k)).unwrap()).collect();
    assert_eq!(expected, replay);
    assert!(b.load_state(&[1.0]).is_err());
}

#[test]
fn reward_upper_bound() {
    let mut e = Env::new(EnvConfig::default());
    e.reset(9);
    for k in 0..300 {
        let r = e.step(&[(k as f64 * 0.1).sin(), 0.5, -0.5, 1.0, 3.0]).unwrap();
        assert!(r.reward <= 1.0 && r.reward.is_finite());
        if r.done {
            e.reset(k as u64);
        }
    }
}

#[test]
fn sync_error_examples() {
    let paired = contacts_segment(vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]]);
    assert_eq!(sync_error(&paired).unwrap(), 0.0);
    let anti = contacts_segment(vec![vec![1.0, 0.0, 0.0, 1.0]; 6]);
    assert_eq!(sync_error(&anti).unwrap(), 2.0);
    let mixed = contacts_segment(vec![vec![1.0, 0.0, 1.0, 1.0], vec![1.0, 1.0, 0.0, 0.0]]);
    assert_eq!(sync_error(&mixed).unwrap(), 0.5);

    let mut channels = BTreeMap::new();
    channels.insert("commands".to_string(), vec![vec![1.0]; 3]);
    let seg = TrajectorySegment::new(channels, vec![], 0, 0).unwrap();
    assert_eq!(sync_error(&seg).unwrap_err(), EnvError::MissingChannel("feet_contacts".into()));
}

#[test]
fn cadence_examples() {
    assert_eq!(cadence(&contacts_segment(vec![vec![1.0, 0.0, 1.0, 0.0]; 24]), 0.05).unwrap(), 0.0);
    let toggling: Vec<Vec<f64>> = (0..20).map(|t| vec![(t % 2) as f64, 1.0, 0.0, 1.0]).collect();
    assert_abs_diff_eq!(cadence(&contacts_segment(toggling), 0.05).unwrap(), 2.5, epsilon = 1e-12);
    // Two onsets per foot over 24 steps: contact at steps 5 and 15.
    let two: Vec<Vec<f64>> = (0..24)
        .map(|t| vec![if t == 5 || t == 15 { 1.0 } else { 0.0 }; 4])
        .collect();
    assert_abs_diff_eq!(cadence(&contacts_segment(two), 0.05).unwrap(), 8.0 / 4.8, epsilon = 1e-12);
    assert_eq!(cadence(&contacts_segment(vec![vec![0.0; 4]]), 0.05).unwrap_err(), EnvError::TooShort(1));
}

fn contact_rows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(proptest::bool::ANY, 4), 2..30)
        .prop_map(|rows| rows.into_iter().map(|r| r.into_iter().map(|b| f64::from(u8::from(b))).collect()).collect())
}

proptest! {
    #[test]
    fn sync_error_is_left_right_symmetric(rows in contact_rows_strategy()) {
        let swapped: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[1], r[0], r[3], r[2]]).collect();
        let a = sync_error(&contacts_segment(rows)).unwrap();
        prop_assert_eq!(a, sync_error(&contacts_segment(swapped)).unwrap());
        prop_assert!((0.0..=2.0).contains(&a));
    }

    #[test]
    fn cadence_ignores_foot_labels(rows in contact_rows_strategy(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let permuted: Vec<Vec<f64>> = rows.iter().map(|r| perm.iter().map(|&i| r[i]).collect()).collect();
        prop_assert_eq!(
            cadence(&contacts_segment(rows), 0.05).unwrap(),
            cadence(&contacts_segment(permuted), 0.05).unwrap()
        );
    }
}

#[test]
fn config_validation() {
    assert!(EnvConfig::default().validate(24).is_ok());
    assert!(EnvConfig { episode_length: 10, ..EnvConfig::default() }.validate(24).is_err());
    assert!(EnvConfig { dt: 0.0, ..EnvConfig::default() }.validate(24).is_err());
}
