//! The online loop: bootstrap labeling, PPO epochs on mixed rewards, pair
//! collection and periodic predictor refreshes.

mod state;

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use state::{CycleReport, LoopState, MetricsRow, PolicyView};

use crate::annotation::{AnnotationError, SegmentPair};
use crate::envs::EnvError;
use crate::preference::PreferenceTriple;
use crate::rl::{RlError, RolloutBuffer};
use crate::trainer::TrainerError;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("loop config: {0}")]
    Config(String),
    #[error("cannot sample pairs: {0}")]
    TooShort(String),
    #[error("bootstrap gave up after {attempts} rollouts with {collected} of {needed} triples")]
    BootstrapExhausted {
        attempts: usize,
        collected: usize,
        needed: usize,
        /// Triples gathered before giving up.
        partial: Vec<PreferenceTriple>,
    },
    #[error("annotation failed during bootstrap: {source}")]
    BootstrapAnnotation {
        source: AnnotationError,
        partial: Vec<PreferenceTriple>,
    },
    #[error("state does not match the configuration: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetWindow {
    /// Keep only the newest |D_p| triples.
    Latest,
    /// Keep everything and resample |D_p| triples for each retrain.
    FullProcess,
}

fn d_epochs() -> usize {
    1000
}
fn d_interval() -> usize {
    50
}
fn d_pairs() -> usize {
    10
}
fn d_envs() -> usize {
    16
}
fn d_steps() -> usize {
    96
}
fn d_dataset() -> usize {
    500
}
fn d_window() -> DatasetWindow {
    DatasetWindow::Latest
}
fn d_segment() -> usize {
    24
}
fn d_attempts() -> usize {
    20
}
fn d_eval_envs() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    /// Total epochs N.
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Epochs between predictor refreshes, M.
    #[serde(default = "d_interval")]
    pub update_interval: usize,
    /// Pairs pushed into the buffer per epoch, K.
    #[serde(default = "d_pairs")]
    pub pairs_per_epoch: usize,
    /// Parallel environments S.
    #[serde(default = "d_envs")]
    pub num_envs: usize,
    /// Steps per environment per epoch T.
    #[serde(default = "d_steps")]
    pub steps_per_epoch: usize,
    /// Preference dataset size |D_p|.
    #[serde(default = "d_dataset")]
    pub dataset_size: usize,
    #[serde(default = "d_window")]
    pub window: DatasetWindow,
    /// Segment length H.
    #[serde(default = "d_segment")]
    pub segment_len: usize,
    /// Rollouts the bootstrap may use to fill the dataset.
    #[serde(default = "d_attempts")]
    pub bootstrap_attempts: usize,
    /// Run a deterministic evaluation every this many epochs; 0 disables it.
    #[serde(default)]
    pub eval_interval: usize,
    #[serde(default = "d_eval_envs")]
    pub eval_envs: usize,
    /// Evaluation length; 0 means one episode.
    #[serde(default)]
    pub eval_steps: usize,
    /// Plain PPO: no predictor, no pairs, β ignored.
    #[serde(default)]
    pub baseline: bool,
    /// Free-form tag copied into every metrics row.
    #[serde(default)]
    pub variant: String,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            update_interval: d_interval(),
            pairs_per_epoch: d_pairs(),
            num_envs: d_envs(),
            steps_per_epoch: d_steps(),
            dataset_size: d_dataset(),
            window: d_window(),
            segment_len: d_segment(),
            bootstrap_attempts: d_attempts(),
            eval_interval: 0,
            eval_envs: d_eval_envs(),
            eval_steps: 0,
            baseline: false,
            variant: String::new(),
        }
    }
}

impl LoopConfig {
    /// Capacity of B_p, `M·K`.
    pub fn buffer_capacity(&self) -> usize {
        self.update_interval * self.pairs_per_epoch
    }

    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |m: String| Err(LoopError::Config(m));
        if self.update_interval == 0 || self.pairs_per_epoch == 0 {
            return bad("update_interval and pairs_per_epoch must be positive".into());
        }
        if self.num_envs < 2 {
            return bad(format!("pairs need at least 2 environments, got {}", self.num_envs));
        }
        if self.segment_len == 0 || self.steps_per_epoch < self.segment_len {
            return bad(format!(
                "steps_per_epoch {} must be at least segment_len {} (> 0)",
                self.steps_per_epoch, self.segment_len
            ));
        }
        if self.dataset_size < self.buffer_capacity() {
            return bad(format!(
                "dataset_size {} is smaller than the buffer capacity {}",
                self.dataset_size,
                self.buffer_capacity()
            ));
        }
        if self.bootstrap_attempts == 0 {
            return bad("bootstrap_attempts must be positive".into());
        }
        Ok(())
    }
}

/// Unlabeled pairs awaiting the next refresh.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreferenceBuffer {
    pairs: Vec<SegmentPair>,
    capacity: usize,
}

impl PreferenceBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            pairs: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.pairs.len() >= self.capacity
    }

    pub fn pairs(&self) -> &[SegmentPair] {
        &self.pairs
    }

    /// Appends while room remains; returns how many pairs were taken.
    pub fn push(&mut self, pairs: Vec<SegmentPair>) -> usize {
        let room = self.capacity - self.pairs.len().min(self.capacity);
        let n = pairs.len().min(room);
        self.pairs.extend(pairs.into_iter().take(n));
        n
    }

    pub fn take(&mut self) -> Vec<SegmentPair> {
        std::mem::take(&mut self.pairs)
    }
}

/// Triples in arrival order, evicting the oldest beyond `capacity`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlidingDataset {
    triples: VecDeque<PreferenceTriple>,
    capacity: usize,
}

impl SlidingDataset {
    pub fn new(capacity: usize) -> Self {
        Self {
            triples: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Appends and returns the number of evicted triples.
    pub fn extend(&mut self, incoming: impl IntoIterator<Item = PreferenceTriple>) -> usize {
        let mut evicted = 0;
        for t in incoming {
            self.triples.push_back(t);
            if self.triples.len() > self.capacity {
                self.triples.pop_front();
                evicted += 1;
            }
        }
        evicted
    }

    pub fn iter(&self) -> impl Iterator<Item = &PreferenceTriple> {
        self.triples.iter()
    }

    pub fn to_vec(&self) -> Vec<PreferenceTriple> {
        self.triples.iter().cloned().collect()
    }
}

/// Uniform subsample of `n` triples without replacement, in pool order.
pub fn resample_pool<R: Rng + ?Sized>(pool: &[PreferenceTriple], n: usize, rng: &mut R) -> Vec<PreferenceTriple> {
    if pool.len() <= n {
        return pool.to_vec();
    }
    let mut idx = sample(rng, pool.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

/// Start offsets of `len`-step windows of env `s` that stay inside one episode.
fn valid_starts(buffer: &RolloutBuffer, s: usize, len: usize) -> Vec<usize> {
    if buffer.steps < len {
        return Vec::new();
    }
    (0..=buffer.steps - len)
        .filter(|&t| (t..t + len - 1).all(|k| !buffer.dones[buffer.index(k, s)]))
        .collect()
}

/// Draws `k` pairs of `len`-step segments. The two halves of a pair come from
/// different environments, hence different episodes; offsets are uniform over
/// the windows that do not cross an episode end.
pub fn sample_pairs<R: Rng + ?Sized>(
    buffer: &RolloutBuffer,
    k: usize,
    len: usize,
    rng: &mut R,
) -> Result<Vec<SegmentPair>, LoopError> {
    let starts: Vec<Vec<usize>> = (0..buffer.num_envs).map(|s| valid_starts(buffer, s, len)).collect();
    let usable: Vec<usize> = (0..buffer.num_envs).filter(|&s| !starts[s].is_empty()).collect();
    if usable.len() < 2 {
        return Err(LoopError::TooShort(format!(
            "{} of {} rollouts hold a {len}-step window inside one episode; need 2",
            usable.len(),
            buffer.num_envs
        )));
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let chosen = sample(rng, usable.len(), 2);
        let (s1, s2) = (usable[chosen.index(0)], usable[chosen.index(1)]);
        let t1 = starts[s1][rng.random_range(0..starts[s1].len())];
        let t2 = starts[s2][rng.random_range(0..starts[s2].len())];
        out.push(SegmentPair::new(buffer.segment(s1, t1, len)?, buffer.segment(s2, t2, len)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
