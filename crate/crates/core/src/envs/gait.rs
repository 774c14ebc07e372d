use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::Rng;

use super::{check_state, tracking_reward, EnvConfig, EnvError, StepResult};
use crate::seeding::rng_from_seed;

/// Fraction of each gait cycle a foot spends on the ground.
pub const DUTY_FACTOR: f64 = 0.6;
pub(crate) const OBS_DIM: usize = 18;
const MIN_RATE: f64 = 0.5;
const MAX_RATE: f64 = 5.0;
const STATE_LEN: usize = 8;

/// Quadruped stand-in: a velocity integrator plus four phase oscillators.
///
/// Feet are ordered FL, FR, RL, RR. Action layout: forward acceleration,
/// then one phase-rate offset per foot.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitWalker {
    config: EnvConfig,
    command: f64,
    velocity: f64,
    phases: [f64; 4],
    steps: usize,
}

pub(crate) fn contact(phase: f64) -> f64 {
    if phase.rem_euclid(1.0) < DUTY_FACTOR {
        1.0
    } else {
        0.0
    }
}

impl GaitWalker {
    pub fn new(config: EnvConfig) -> Self {
        Self {
            config,
            command: 0.0,
            velocity: 0.0,
            phases: [0.0; 4],
            steps: 0,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub(crate) fn config_mut(&mut self) -> &mut EnvConfig {
        &mut self.config
    }

    pub fn command(&self) -> f64 {
        self.command
    }

    pub fn velocity(&self) -> f64 {
        self.velocity
    }

    pub fn phases(&self) -> [f64; 4] {
        self.phases
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn contacts(&self) -> [f64; 4] {
        self.phases.map(contact)
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        self.command = rng.random_range(self.config.command_min..=self.config.command_max);
        self.velocity = 0.0;
        self.phases = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        self.steps = 0;
        self.observation()
    }

    /// Phase rate in Hz for a raw phase action.
    pub fn phase_rate(&self, action: f64) -> f64 {
        (self.config.base_phase_rate + action).clamp(MIN_RATE, MAX_RATE)
    }

    pub fn step(&mut self, action: &[f64]) -> StepResult {
        let dt = self.config.dt;
        let accel = self.config.action_scale * action[0].clamp(-1.0, 1.0);
        self.velocity = (self.velocity + accel * dt - self.config.drag * self.velocity * dt).clamp(0.0, 3.0);
        for i in 0..4 {
            let rate = self.phase_rate(action[1 + i]);
            self.phases[i] = (self.phases[i] + rate * dt).rem_euclid(1.0);
        }
        self.steps += 1;
        let norm2: f64 = action.iter().map(|a| a * a).sum();
        let reward = tracking_reward(self.command, self.velocity) - self.config.action_penalty * norm2;
        StepResult {
            observation: self.observation(),
            reward,
            done: self.steps >= self.config.episode_length,
            info: self.channels(),
        }
    }

    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(OBS_DIM);
        obs.push(self.command);
        obs.push(self.velocity);
        for p in self.phases {
            obs.push((TAU * p).sin());
            obs.push((TAU * p).cos());
        }
        obs.extend(self.contacts());
        for (a, b) in [(0, 1), (2, 3)] {
            let d = TAU * (self.phases[a] - self.phases[b]);
            obs.push(d.sin());
            obs.push(d.cos());
        }
        obs
    }

    pub fn channels(&self) -> BTreeMap<String, Vec<f64>> {
        let c = self.contacts();
        let stance: f64 = c.iter().sum::<f64>() / 4.0;
        // Body attitude follows the support pattern: more feet down on one
        // side lowers that side.
        let roll = 0.05 * ((c[0] + c[2]) - (c[1] + c[3])) / 2.0;
        let pitch = 0.05 * ((c[0] + c[1]) - (c[2] + c[3])) / 2.0;
        let lateral = 0.1 * roll * self.velocity;
        let mut m = BTreeMap::new();
        m.insert("commands".into(), vec![self.command]);
        m.insert("base_linear_velocity".into(), vec![self.velocity, lateral, 0.0]);
        m.insert("base_height".into(), vec![0.30 + 0.04 * (stance - DUTY_FACTOR)]);
        m.insert("base_roll_pitch_yaw".into(), vec![roll, pitch, 0.0]);
        m.insert("feet_phases".into(), self.phases.to_vec());
        m.insert("feet_contacts".into(), c.to_vec());
        m
    }

    pub fn save_state(&self) -> Vec<f64> {
        let mut s = vec![self.command, self.velocity];
        s.extend(self.phases);
        s.push(self.steps as f64);
        s.push(self.config.drag);
        s
    }

    pub fn load_state(&mut self, s: &[f64]) -> Result<(), EnvError> {
        check_state(s, STATE_LEN)?;
        self.command = s[0];
        self.velocity = s[1];
        self.phases.copy_from_slice(&s[2..6]);
        self.steps = s[6] as usize;
        self.config.drag = s[7];
        Ok(())
    }
}
