//! Toy environments whose channels match the locomotion prompt schema, and
//! the gait metrics computed from contact sequences.

mod gait;
mod metrics;
mod point_mass;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gait::GaitWalker;
pub use metrics::{cadence, contact_rows, sync_error, tracking_error, CONTACT_CHANNEL};
pub use point_mass::PointMass;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action has {found} entries, expected {expected}")]
    ActionDim { expected: usize, found: usize },
    #[error("action contains a non-finite value")]
    NonFiniteAction,
    #[error("segment is missing channel `{0}`")]
    MissingChannel(String),
    #[error("channel `{channel}` has width {found}, expected {expected}")]
    ChannelWidth {
        channel: String,
        expected: usize,
        found: usize,
    },
    #[error("cadence needs at least 2 steps, got {0}")]
    TooShort(usize),
    #[error("env config: {0}")]
    Config(String),
    #[error("saved env state has {found} values, expected {expected}")]
    State { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    GaitWalker,
    PointMass,
}

fn d_kind() -> EnvKind {
    EnvKind::GaitWalker
}
fn d_dt() -> f64 {
    0.05
}
fn d_len() -> usize {
    240
}
fn d_drag() -> f64 {
    0.5
}
fn d_accel() -> f64 {
    5.0
}
fn d_cmin() -> f64 {
    0.5
}
fn d_cmax() -> f64 {
    2.0
}
fn d_rate() -> f64 {
    2.5
}
fn d_penalty() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default = "d_kind")]
    pub kind: EnvKind,
    /// Seconds per step.
    #[serde(default = "d_dt")]
    pub dt: f64,
    /// Steps per episode T.
    #[serde(default = "d_len")]
    pub episode_length: usize,
    /// Linear velocity drag per second; the friction analogue for transfer runs.
    #[serde(default = "d_drag")]
    pub drag: f64,
    /// Acceleration (m/s²) produced by a unit forward action.
    #[serde(default = "d_accel")]
    pub action_scale: f64,
    #[serde(default = "d_cmin")]
    pub command_min: f64,
    #[serde(default = "d_cmax")]
    pub command_max: f64,
    /// Phase rate (Hz) for a zero phase action.
    #[serde(default = "d_rate")]
    pub base_phase_rate: f64,
    /// Weight of the squared action norm in the environment reward.
    #[serde(default = "d_penalty")]
    pub action_penalty: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: d_kind(),
            dt: d_dt(),
            episode_length: d_len(),
            drag: d_drag(),
            action_scale: d_accel(),
            command_min: d_cmin(),
            command_max: d_cmax(),
            base_phase_rate: d_rate(),
            action_penalty: d_penalty(),
        }
    }
}

impl EnvConfig {
    pub fn point_mass() -> Self {
        Self {
            kind: EnvKind::PointMass,
            ..Self::default()
        }
    }

    pub fn validate(&self, segment_len: usize) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.episode_length < segment_len {
            return bad(format!(
                "episode_length {} is shorter than the segment length {segment_len}",
                self.episode_length
            ));
        }
        if !(self.drag >= 0.0 && self.action_scale > 0.0) {
            return bad("drag must be >= 0 and action_scale > 0".into());
        }
        if !(self.command_min <= self.command_max && self.command_min >= 0.0) {
            return bad("need 0 <= command_min <= command_max".into());
        }
        Ok(())
    }
}

/// Outcome of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    /// Environment reward r_E.
    pub reward: f64,
    pub done: bool,
    /// Raw channels of the state reached by this step.
    pub info: BTreeMap<String, Vec<f64>>,
}

/// Either environment behind one concrete type, so vectors of envs can be
/// stored, cloned and checkpointed without trait objects.
#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    Gait(GaitWalker),
    PointMass(PointMass),
}

macro_rules! each {
    ($self:expr, $e:ident => $body:expr) => {
        match $self {
            Env::Gait($e) => $body,
            Env::PointMass($e) => $body,
        }
    };
}

impl Env {
    pub fn new(config: EnvConfig) -> Self {
        match config.kind {
            EnvKind::GaitWalker => Env::Gait(GaitWalker::new(config)),
            EnvKind::PointMass => Env::PointMass(PointMass::new(config)),
        }
    }

    pub fn config(&self) -> &EnvConfig {
        each!(self, e => e.config())
    }

    pub fn observation_dim(&self) -> usize {
        match self {
            Env::Gait(_) => gait::OBS_DIM,
            Env::PointMass(_) => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Env::Gait(_) => 5,
            Env::PointMass(_) => 1,
        }
    }

    /// Samples a command and initial state from `seed`; returns the first observation.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        each!(self, e => e.reset(seed))
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if action.len() != self.action_dim() {
            return Err(EnvError::ActionDim {
                expected: self.action_dim(),
                found: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        Ok(each!(self, e => e.step(action)))
    }

    pub fn observation(&self) -> Vec<f64> {
        each!(self, e => e.observation())
    }

    /// Raw channels of the current state.
    pub fn channels(&self) -> BTreeMap<String, Vec<f64>> {
        each!(self, e => e.channels())
    }

    /// `(name, width)` of every channel in name order.
    pub fn schema(&self) -> Vec<(String, usize)> {
        self.channels().into_iter().map(|(k, v)| (k, v.len())).collect()
    }

    pub fn command(&self) -> f64 {
        each!(self, e => e.command())
    }

    pub fn velocity(&self) -> f64 {
        each!(self, e => e.velocity())
    }

    pub fn steps_taken(&self) -> usize {
        each!(self, e => e.steps_taken())
    }

    /// Flat state vector for checkpoints.
    pub fn save_state(&self) -> Vec<f64> {
        each!(self, e => e.save_state())
    }

    pub fn load_state(&mut self, state: &[f64]) -> Result<(), EnvError> {
        each!(self, e => e.load_state(state))
    }

    /// Changes the drag coefficient, keeping the current state.
    pub fn set_drag(&mut self, drag: f64) {
        each!(self, e => e.config_mut().drag = drag)
    }
}

pub(crate) fn tracking_reward(command: f64, velocity: f64) -> f64 {
    (-(command - velocity).powi(2) / 0.25).exp()
}

pub(crate) fn check_state(state: &[f64], expected: usize) -> Result<(), EnvError> {
    if state.len() != expected {
        return Err(EnvError::State {
            expected,
            found: state.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
