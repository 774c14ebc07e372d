use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{PPOConfig, RlError};
use crate::numerics::{Activation, Adam, AdamConfig, DenseArray, Mlp, Module, Parameter, Tape, Var};

pub(crate) const LOG_STD_MIN: f64 = -5.0;
pub(crate) const LOG_STD_MAX: f64 = 2.0;

/// Running mean and variance per feature (parallel-merge update).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm {
    pub count: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Merges a batch of rows into the statistics.
    pub fn update<'a>(&mut self, rows: impl IntoIterator<Item = &'a [f64]>) {
        let d = self.dim();
        let mut n = 0.0;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for r in rows {
            n += 1.0;
            for i in 0..d {
                sum[i] += r[i];
                sq[i] += r[i] * r[i];
            }
        }
        if n == 0.0 {
            return;
        }
        let total = self.count + n;
        for i in 0..d {
            let bm = sum[i] / n;
            let bv = (sq[i] / n - bm * bm).max(0.0);
            let delta = bm - self.mean[i];
            let m2 = self.var[i] * self.count + bv * n + delta * delta * self.count * n / total;
            self.mean[i] += delta * n / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(v, (m, s))| ((v - m) / (s + 1e-8).sqrt()).clamp(-10.0, 10.0))
            .collect()
    }
}

/// Policy mean network, state-independent log-std and value network.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub policy: Mlp,
    pub log_std: Parameter,
    pub value: Mlp,
}

impl Module for PolicyNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.policy.visit_params(f);
        f(&self.log_std);
        self.value.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.policy.visit_params_mut(f);
        f(&mut self.log_std);
        self.value.visit_params_mut(f);
    }
}

/// Gaussian log-density constant per action dimension.
pub(crate) fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

impl PolicyNet {
    /// Clamped log-std on the tape.
    pub(crate) fn log_std_var(&self, tape: &mut Tape) -> Var {
        let p = tape.param(&self.log_std);
        tape.clamp(p, LOG_STD_MIN, LOG_STD_MAX)
    }

    pub fn log_std_values(&self) -> Vec<f64> {
        self.log_std
            .value()
            .data()
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    /// `(means [n, act], values [n])` for normalized observations.
    pub fn evaluate(&self, obs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>), RlError> {
        let mut tape = Tape::new();
        let x = tape.constant(DenseArray::from_rows(obs)?);
        let mu = self.policy.forward(&mut tape, x)?;
        let v = self.value.forward(&mut tape, x)?;
        let act = self.policy.outputs();
        let means = tape.value(mu).data().chunks(act).map(<[f64]>::to_vec).collect();
        Ok((means, tape.value(v).data().to_vec()))
    }
}

/// Log-density of `action` under a diagonal Gaussian.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - half_log_two_pi()
        })
        .sum()
}

/// The checkpointable agent: networks, observation statistics and optimizer.
#[derive(Clone, Debug)]
pub struct PolicyBundle {
    pub net: PolicyNet,
    pub obs_norm: RunningNorm,
    /// Statistics of r_p, used only when preference reward normalization is on.
    pub pref_norm: RunningNorm,
    pub optimizer: Adam,
}

impl PolicyBundle {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, config: &PPOConfig, rng: &mut R) -> Result<Self, RlError> {
        config.validate()?;
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.hidden);
        let mut psizes = sizes.clone();
        psizes.push(act_dim);
        let mut vsizes = sizes;
        vsizes.push(1);
        let net = PolicyNet {
            policy: Mlp::new("policy", &psizes, Activation::Elu, 0.01, rng),
            log_std: Parameter::new("policy.log_std", DenseArray::full(&[act_dim], config.init_log_std))?,
            value: Mlp::new("value", &vsizes, Activation::Elu, 1.0, rng),
        };
        Ok(Self {
            net,
            obs_norm: RunningNorm::new(obs_dim),
            pref_norm: RunningNorm::new(1),
            optimizer: Adam::new(AdamConfig::with_lr(config.learning_rate)),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.net.policy.inputs()
    }

    pub fn act_dim(&self) -> usize {
        self.net.policy.outputs()
    }

    /// Samples actions for a batch of normalized observations.
    /// Returns `(actions, log_probs, values)`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[Vec<f64>],
        rng: &mut R,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>), RlError> {
        let (means, values) = self.net.evaluate(obs)?;
        let ls = self.net.log_std_values();
        let mut actions = Vec::with_capacity(means.len());
        let mut logp = Vec::with_capacity(means.len());
        for m in &means {
            let a: Vec<f64> = m
                .iter()
                .zip(&ls)
                .map(|(mu, l)| {
                    let z: f64 = StandardNormal.sample(rng);
                    mu + l.exp() * z
                })
                .collect();
            logp.push(gaussian_log_prob(&a, m, &ls));
            actions.push(a);
        }
        Ok((actions, logp, values))
    }

    /// Mean actions for raw observations, without exploration noise.
    pub fn act_deterministic(&self, raw_obs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, RlError> {
        let obs: Vec<Vec<f64>> = raw_obs.iter().map(|o| self.obs_norm.normalize(o)).collect();
        Ok(self.net.evaluate(&obs)?.0)
    }
}
