use std::collections::BTreeMap;

use rand::Rng;

use super::{check_state, tracking_reward, EnvConfig, EnvError, StepResult};
use crate::seeding::rng_from_seed;

/// One-dimensional velocity tracking; the action is a forward acceleration.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMass {
    config: EnvConfig,
    command: f64,
    velocity: f64,
    steps: usize,
}

impl PointMass {
    pub fn new(config: EnvConfig) -> Self {
        Self {
            config,
            command: 0.0,
            velocity: 0.0,
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

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        self.command = rng.random_range(self.config.command_min..=self.config.command_max);
        self.velocity = 0.0;
        self.steps = 0;
        self.observation()
    }

    pub fn step(&mut self, action: &[f64]) -> StepResult {
        let dt = self.config.dt;
        let accel = self.config.action_scale * action[0].clamp(-1.0, 1.0);
        self.velocity = (self.velocity + accel * dt - self.config.drag * self.velocity * dt).clamp(0.0, 3.0);
        self.steps += 1;
        StepResult {
            observation: self.observation(),
            reward: tracking_reward(self.command, self.velocity),
            done: self.steps >= self.config.episode_length,
            info: self.channels(),
        }
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![self.command, self.velocity]
    }

    pub fn channels(&self) -> BTreeMap<String, Vec<f64>> {
        let mut m = BTreeMap::new();
        m.insert("commands".into(), vec![self.command]);
        m.insert("base_linear_velocity".into(), vec![self.velocity, 0.0, 0.0]);
        m
    }

    pub fn save_state(&self) -> Vec<f64> {
        vec![self.command, self.velocity, self.steps as f64, self.config.drag]
    }

    pub fn load_state(&mut self, s: &[f64]) -> Result<(), EnvError> {
        check_state(s, 4)?;
        self.command = s[0];
        self.velocity = s[1];
        self.steps = s[2] as usize;
        self.config.drag = s[3];
        Ok(())
    }
}
