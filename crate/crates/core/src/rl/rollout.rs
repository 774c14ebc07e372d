use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{compute_gae, mix_rewards, PPOConfig, PolicyBundle, RlError};
use crate::envs::{cadence, sync_error, tracking_error, Env, EnvConfig, CONTACT_CHANNEL};
use crate::preference::{feature_row, TrajectorySegment};
use crate::seeding::{derive_seed, Stream};
use crate::trainer::EnsemblePredictor;

/// One persistent environment plus the bookkeeping the rollout needs.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSlot {
    pub env: Env,
    /// Raw observation of the current state.
    pub observation: Vec<f64>,
    /// Index of the current episode within this slot.
    pub episode_index: u64,
    pub episode_step: usize,
    /// Trailing predictor feature rows of the current episode.
    pub window: VecDeque<Vec<f64>>,
}

/// `S` environments reset from counter-derived seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct VecEnv {
    pub slots: Vec<EnvSlot>,
    seed: u64,
    stream: Stream,
}

impl VecEnv {
    /// Resets from the `EnvReset` stream.
    pub fn new(config: &EnvConfig, count: usize, seed: u64) -> Self {
        Self::with_stream(config, count, seed, Stream::EnvReset)
    }

    pub fn with_stream(config: &EnvConfig, count: usize, seed: u64, stream: Stream) -> Self {
        let mut v = Self {
            slots: Vec::with_capacity(count),
            seed,
            stream,
        };
        for s in 0..count {
            let mut env = Env::new(config.clone());
            let observation = env.reset(reset_seed(seed, stream, count, s, 0));
            v.slots.push(EnvSlot {
                env,
                observation,
                episode_index: 0,
                episode_step: 0,
                window: VecDeque::new(),
            });
        }
        v
    }

    /// Rebuilds from saved slots (checkpoint restore).
    pub fn from_slots(slots: Vec<EnvSlot>, seed: u64, stream: Stream) -> Self {
        Self { slots, seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Global episode id of slot `s`'s current episode.
    pub fn episode_id(&self, s: usize) -> u64 {
        self.slots[s].episode_index * self.slots.len() as u64 + s as u64
    }

    fn restart(&mut self, s: usize) {
        let seed = reset_seed(self.seed, self.stream, self.slots.len(), s, self.slots[s].episode_index + 1);
        let slot = &mut self.slots[s];
        slot.episode_index += 1;
        slot.episode_step = 0;
        slot.window.clear();
        slot.observation = slot.env.reset(seed);
    }

    pub fn set_drag(&mut self, drag: f64) {
        for s in &mut self.slots {
            s.env.set_drag(drag);
        }
    }
}

fn reset_seed(seed: u64, stream: Stream, count: usize, slot: usize, episode: u64) -> u64 {
    derive_seed(seed, stream, slot as u64 + count as u64 * episode)
}

/// `S × T` steps stored t-major: entry `t·S + s`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub steps: usize,
    /// Normalized observations the policy acted on.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub env_rewards: Vec<f64>,
    pub pref_rewards: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Empty until `compute_advantages`.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// V of the state after the last step, per env.
    pub last_values: Vec<f64>,
    /// Channels of the state each step reached.
    pub channels: Vec<BTreeMap<String, Vec<f64>>>,
    pub episodes: Vec<u64>,
    pub episode_steps: Vec<usize>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn index(&self, t: usize, s: usize) -> usize {
        t * self.num_envs + s
    }

    /// GAE per environment sequence, stored back into the buffer.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        let (n, steps) = (self.num_envs, self.steps);
        self.advantages = vec![0.0; n * steps];
        self.returns = vec![0.0; n * steps];
        for s in 0..n {
            let idx: Vec<usize> = (0..steps).map(|t| t * n + s).collect();
            let r: Vec<f64> = idx.iter().map(|&i| self.rewards[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| self.values[i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (adv, ret) = compute_gae(&r, &v, &d, self.last_values[s], gamma, lambda);
            for (k, &i) in idx.iter().enumerate() {
                self.advantages[i] = adv[k];
                self.returns[i] = ret[k];
            }
        }
    }

    /// Steps `start..start + len` of env `s` as a segment.
    pub fn segment(&self, s: usize, start: usize, len: usize) -> Result<TrajectorySegment, RlError> {
        if s >= self.num_envs || len == 0 || start + len > self.steps {
            return Err(RlError::Buffer(format!(
                "segment env {s} steps {start}..{} outside {}x{}",
                start + len,
                self.num_envs,
                self.steps
            )));
        }
        let mut channels: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        let mut actions = Vec::with_capacity(len);
        for t in start..start + len {
            let i = self.index(t, s);
            for (k, v) in &self.channels[i] {
                channels.entry(k.clone()).or_default().push(v.clone());
            }
            actions.push(self.actions[i].clone());
        }
        let first = self.index(start, s);
        TrajectorySegment::new(channels, actions, self.episodes[first], self.episode_steps[first])
            .map_err(|e| RlError::Buffer(e.to_string()))
    }

    /// `(start, len)` of each env's stretches between episode ends.
    pub fn chunks(&self, s: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for t in 0..self.steps {
            if self.dones[self.index(t, s)] || t + 1 == self.steps {
                out.push((start, t + 1 - start));
                start = t + 1;
            }
        }
        out
    }

    /// Gait and tracking metrics over every chunk, weighted by length.
    pub fn metrics(&self, dt: f64) -> Result<EvalMetrics, RlError> {
        let mut acc = MetricAccumulator::default();
        for s in 0..self.num_envs {
            for (start, len) in self.chunks(s) {
                acc.add(&self.segment(s, start, len)?, dt)?;
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok(acc.finish(mean(&self.env_rewards)))
    }
}

/// Summary of a rollout or evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub tracking_error: f64,
    /// `None` without contact channels.
    pub sync_error: Option<f64>,
    pub cadence: Option<f64>,
    pub mean_reward: f64,
}

#[derive(Default)]
struct MetricAccumulator {
    steps: f64,
    tracking: f64,
    sync: Option<f64>,
    cadence_steps: f64,
    cadence: Option<f64>,
}

impl MetricAccumulator {
    fn add(&mut self, seg: &TrajectorySegment, dt: f64) -> Result<(), RlError> {
        let n = seg.len() as f64;
        self.steps += n;
        self.tracking += n * tracking_error(seg)?;
        if seg.channel(CONTACT_CHANNEL).is_some() {
            *self.sync.get_or_insert(0.0) += n * sync_error(seg)?;
            if seg.len() >= 2 {
                *self.cadence.get_or_insert(0.0) += n * cadence(seg, dt)?;
                self.cadence_steps += n;
            }
        }
        Ok(())
    }

    fn finish(self, mean_reward: f64) -> EvalMetrics {
        let steps = self.steps.max(1.0);
        EvalMetrics {
            tracking_error: self.tracking / steps,
            sync_error: self.sync.map(|v| v / steps),
            cadence: self.cadence.map(|v| v / self.cadence_steps.max(1.0)),
            mean_reward,
        }
    }
}

fn check_dims(bundle: &PolicyBundle, envs: &VecEnv) -> Result<(), RlError> {
    let Some(slot) = envs.slots.first() else {
        return Err(RlError::Buffer("no environments".into()));
    };
    if slot.env.observation_dim() != bundle.obs_dim() {
        return Err(RlError::ObservationDim {
            expected: bundle.obs_dim(),
            found: slot.env.observation_dim(),
        });
    }
    if slot.env.action_dim() != bundle.act_dim() {
        return Err(RlError::ActionDim {
            env: slot.env.action_dim(),
            policy: bundle.act_dim(),
        });
    }
    Ok(())
}

/// Steps every env `steps` times with sampled actions.
///
/// With a predictor, `r_p` at each step scores the trailing window of that
/// env's current episode ending at the step just taken; otherwise `r_p = 0`.
/// Finished episodes are reset in place. The observation normalizer is
/// updated from this rollout's raw observations once collection ends.
pub fn collect_rollout<R: Rng + ?Sized>(
    bundle: &mut PolicyBundle,
    envs: &mut VecEnv,
    predictor: Option<&EnsemblePredictor>,
    steps: usize,
    config: &PPOConfig,
    rng: &mut R,
) -> Result<RolloutBuffer, RlError> {
    check_dims(bundle, envs)?;
    let n = envs.len();
    let total = n * steps;
    let mut buf = RolloutBuffer {
        num_envs: n,
        steps,
        ..Default::default()
    };
    let mut raw_obs = Vec::with_capacity(total);
    let (context, include_actions) = match predictor {
        Some(p) => (p.config().context(), p.config().include_actions),
        None => (0, false),
    };

    for _ in 0..steps {
        let obs: Vec<Vec<f64>> = envs.slots.iter().map(|s| bundle.obs_norm.normalize(&s.observation)).collect();
        let (actions, logp, values) = bundle.act(&obs, rng)?;
        let mut infos = Vec::with_capacity(n);
        for (s, action) in actions.iter().enumerate() {
            let id = envs.episode_id(s);
            let slot = &mut envs.slots[s];
            raw_obs.push(slot.observation.clone());
            let res = slot.env.step(action)?;
            buf.episodes.push(id);
            buf.episode_steps.push(slot.episode_step);
            slot.episode_step += 1;
            if predictor.is_some() {
                let row = feature_row(
                    res.info.values().map(Vec::as_slice),
                    include_actions.then_some(action.as_slice()),
                );
                slot.window.push_back(row);
                while slot.window.len() > context {
                    slot.window.pop_front();
                }
            }
            slot.observation = res.observation;
            buf.env_rewards.push(res.reward);
            buf.dones.push(res.done);
            infos.push(res.info);
        }
        let rp = match predictor {
            Some(p) => {
                let windows: Vec<Vec<Vec<f64>>> = envs.slots.iter().map(|s| s.window.iter().cloned().collect()).collect();
                let views: Vec<&[Vec<f64>]> = windows.iter().map(Vec::as_slice).collect();
                p.predict_windows(&views)?
            }
            None => vec![0.0; n],
        };
        for s in 0..n {
            if buf.dones[buf.dones.len() - n + s] {
                envs.restart(s);
            }
        }
        buf.observations.extend(obs);
        buf.actions.extend(actions);
        buf.log_probs.extend(logp);
        buf.values.extend(values);
        buf.pref_rewards.extend(rp);
        buf.channels.extend(infos);
    }

    let last_obs: Vec<Vec<f64>> = envs.slots.iter().map(|s| bundle.obs_norm.normalize(&s.observation)).collect();
    buf.last_values = bundle.net.evaluate(&last_obs)?.1;

    let rp_scaled: Vec<f64> = if predictor.is_some() && config.normalize_preference_reward {
        bundle.pref_norm.update(buf.pref_rewards.iter().map(std::slice::from_ref));
        buf.pref_rewards.iter().map(|r| bundle.pref_norm.normalize(&[*r])[0]).collect()
    } else {
        buf.pref_rewards.clone()
    };
    buf.rewards = rp_scaled
        .iter()
        .zip(&buf.env_rewards)
        .map(|(p, e)| mix_rewards(*p, *e, config.beta))
        .collect();
    bundle.obs_norm.update(raw_obs.iter().map(Vec::as_slice));
    Ok(buf)
}

/// Deterministic-action rollout in fresh envs reset from the `Evaluation`
/// stream. Leaves the bundle untouched.
pub fn evaluate_policy(
    bundle: &PolicyBundle,
    config: &EnvConfig,
    count: usize,
    steps: usize,
    seed: u64,
) -> Result<EvalMetrics, RlError> {
    let mut envs = VecEnv::with_stream(config, count, seed, Stream::Evaluation);
    check_dims(bundle, &envs)?;
    let mut acc = MetricAccumulator::default();
    let mut reward = 0.0;
    let mut records: Vec<Vec<BTreeMap<String, Vec<f64>>>> = vec![Vec::new(); count];
    let flush = |acc: &mut MetricAccumulator, rows: &mut Vec<BTreeMap<String, Vec<f64>>>| -> Result<(), RlError> {
        if rows.is_empty() {
            return Ok(());
        }
        let mut channels: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for r in rows.drain(..) {
            for (k, v) in r {
                channels.entry(k).or_default().push(v);
            }
        }
        let seg = TrajectorySegment::new(channels, Vec::new(), 0, 0).map_err(|e| RlError::Buffer(e.to_string()))?;
        acc.add(&seg, config.dt)
    };
    for _ in 0..steps {
        let obs: Vec<Vec<f64>> = envs.slots.iter().map(|s| s.observation.clone()).collect();
        let actions = bundle.act_deterministic(&obs)?;
        for (s, a) in actions.iter().enumerate() {
            let res = envs.slots[s].env.step(a)?;
            reward += res.reward;
            envs.slots[s].observation = res.observation;
            records[s].push(res.info);
            if res.done {
                flush(&mut acc, &mut records[s])?;
                envs.restart(s);
            }
        }
    }
    for rows in &mut records {
        flush(&mut acc, rows)?;
    }
    Ok(acc.finish(reward / (count * steps).max(1) as f64))
}
