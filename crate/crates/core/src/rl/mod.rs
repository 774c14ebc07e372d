//! PPO with GAE, a Gaussian MLP policy and the preference reward mixer.

mod policy;
mod ppo;
mod rollout;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use policy::{PolicyBundle, PolicyNet, RunningNorm};
pub use ppo::{ppo_update, UpdateStats};
pub use rollout::{collect_rollout, evaluate_policy, EvalMetrics, EnvSlot, RolloutBuffer, VecEnv};

use crate::envs::EnvError;
use crate::numerics::NumericsError;
use crate::trainer::TrainerError;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("observation has {found} values, policy expects {expected}")]
    ObservationDim { expected: usize, found: usize },
    #[error("env action dim {env} differs from policy action dim {policy}")]
    ActionDim { env: usize, policy: usize },
    #[error("ppo config: {0}")]
    Config(String),
    #[error("non-finite {what} in ppo update (epoch {epoch}, minibatch {minibatch})")]
    NonFiniteLoss {
        what: &'static str,
        epoch: usize,
        minibatch: usize,
    },
    #[error("rollout buffer: {0}")]
    Buffer(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Predictor(#[from] TrainerError),
}

fn d_gamma() -> f64 {
    0.99
}
fn d_lambda() -> f64 {
    0.95
}
fn d_clip() -> f64 {
    0.2
}
fn d_epochs() -> usize {
    4
}
fn d_minibatches() -> usize {
    4
}
fn d_vcoef() -> f64 {
    0.5
}
fn d_ecoef() -> f64 {
    0.005
}
fn d_beta() -> f64 {
    1.0
}
fn d_grad() -> f64 {
    1.0
}
fn d_lr() -> f64 {
    3e-4
}
fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn d_log_std() -> f64 {
    -0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PPOConfig {
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_clip")]
    pub clip: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_minibatches")]
    pub minibatches: usize,
    #[serde(default = "d_vcoef")]
    pub value_coef: f64,
    #[serde(default = "d_ecoef")]
    pub entropy_coef: f64,
    /// Weight β of the preference reward.
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_grad")]
    pub max_grad_norm: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    /// Hidden widths shared by the policy and value networks.
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_log_std")]
    pub init_log_std: f64,
    /// Standardize the preference reward with running statistics before mixing.
    #[serde(default)]
    pub normalize_preference_reward: bool,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self {
            gamma: d_gamma(),
            lambda: d_lambda(),
            clip: d_clip(),
            epochs: d_epochs(),
            minibatches: d_minibatches(),
            value_coef: d_vcoef(),
            entropy_coef: d_ecoef(),
            beta: d_beta(),
            max_grad_norm: d_grad(),
            learning_rate: d_lr(),
            hidden: d_hidden(),
            init_log_std: d_log_std(),
            normalize_preference_reward: false,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return bad("epochs and minibatches must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !self.beta.is_finite() {
            return bad("learning_rate must be >= 0 and beta finite");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }
}

/// `β·r_p + r_E`.
pub fn mix_rewards(preference: f64, environment: f64, beta: f64) -> f64 {
    beta * preference + environment
}

/// GAE over one environment's time-ordered steps.
///
/// `dones[t]` marks that step `t` ended an episode, so nothing after it is
/// bootstrapped into it. `last_value` is V of the state after the final step.
/// Returns `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let keep = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * keep * next_value - values[t];
        next_adv = delta + gamma * lambda * keep * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to mean 0, std 1 (population std, floored).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}
