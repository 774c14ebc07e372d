//! Pool training with validation-based early stopping and top-C ensembling.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Adam, AdamConfig, Module, Tape};
use crate::preference::{
    loss_from_rewards, preference_loss, FeatureStats, PredictorConfig, PreferenceError,
    PreferenceTriple, RewardPredictor,
};
use crate::seeding::{rng_for, Stream};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("dataset has {0} triples; at least 10 are needed for a split")]
    TooSmall(usize),
    #[error("trainer config: {0}")]
    Config(String),
    #[error("member {member}: non-finite loss at epoch {epoch} (train {train}, validation {validation})")]
    NonFiniteLoss {
        member: usize,
        epoch: usize,
        train: f64,
        validation: f64,
    },
    #[error("need at least {needed} members, got {found}")]
    NotEnoughMembers { needed: usize, found: usize },
    #[error("ensemble members disagree on predictor config")]
    ConfigMismatch,
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("writing training curves: {0}")]
    Io(String),
}

fn d_pool() -> usize {
    9
}
fn d_selected() -> usize {
    3
}
fn d_min() -> usize {
    30
}
fn d_max() -> usize {
    90
}
fn d_alpha() -> f64 {
    1.3
}
fn d_val() -> f64 {
    0.1
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    1e-4
}
fn d_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    /// Pool size M.
    #[serde(default = "d_pool")]
    pub pool_size: usize,
    /// Members kept, C.
    #[serde(default = "d_selected")]
    pub selected: usize,
    #[serde(default = "d_min")]
    pub min_epochs: usize,
    #[serde(default = "d_max")]
    pub max_epochs: usize,
    /// Overfit scale α.
    #[serde(default = "d_alpha")]
    pub overfit_scale: f64,
    #[serde(default = "d_val")]
    pub validation_fraction: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    /// Members trained concurrently. Results do not depend on this.
    #[serde(default = "d_workers")]
    pub workers: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            pool_size: d_pool(),
            selected: d_selected(),
            min_epochs: d_min(),
            max_epochs: d_max(),
            overfit_scale: d_alpha(),
            validation_fraction: d_val(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            workers: d_workers(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::Config(m.to_string()));
        if self.selected == 0 || self.selected > self.pool_size {
            return bad("need 1 <= selected <= pool_size");
        }
        if self.max_epochs == 0 || self.min_epochs > self.max_epochs {
            return bad("need min_epochs <= max_epochs and max_epochs >= 1");
        }
        if self.overfit_scale <= 1.0 || !self.overfit_scale.is_finite() {
            return bad("overfit_scale must exceed 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return bad("validation_fraction must lie in (0, 0.5)");
        }
        if self.batch_size == 0 || self.workers == 0 {
            return bad("batch_size and workers must be positive");
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return bad("learning_rate must be non-negative");
        }
        Ok(())
    }
}

/// Shuffled split; the validation part holds `round(n * fraction)` items.
pub fn split_dataset<T: Clone, R: Rng + ?Sized>(
    data: &[T],
    fraction: f64,
    rng: &mut R,
) -> Result<(Vec<T>, Vec<T>), TrainerError> {
    if data.len() < 10 {
        return Err(TrainerError::TooSmall(data.len()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let n_val = ((data.len() as f64 * fraction).round() as usize).clamp(1, data.len() - 1);
    let val = order[..n_val].iter().map(|&i| data[i].clone()).collect();
    let train = order[n_val..].iter().map(|&i| data[i].clone()).collect();
    Ok((train, val))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Overfit,
    MaxEpochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// Loss history of one pool member.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingCurve {
    pub member: usize,
    pub records: Vec<EpochRecord>,
    pub reason: StopReason,
}

impl TrainingCurve {
    pub fn final_validation_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.validation_loss)
    }

    pub fn stop_epoch(&self) -> usize {
        self.records.last().map_or(0, |r| r.epoch)
    }
}

/// Runs epochs `0..max_epochs` until the overfit rule fires.
///
/// `epoch_fn(m)` trains one epoch and returns `(train_loss, validation_loss)`.
/// Training stops at epoch `m` when `validation > α·train` and `m > min_epochs`.
pub fn run_early_stopping<F>(
    config: &TrainerConfig,
    member: usize,
    mut epoch_fn: F,
) -> Result<TrainingCurve, TrainerError>
where
    F: FnMut(usize) -> Result<(f64, f64), TrainerError>,
{
    let mut records = Vec::new();
    for epoch in 0..config.max_epochs {
        let (train, validation) = epoch_fn(epoch)?;
        if !train.is_finite() || !validation.is_finite() {
            return Err(TrainerError::NonFiniteLoss {
                member,
                epoch,
                train,
                validation,
            });
        }
        records.push(EpochRecord {
            epoch,
            train_loss: train,
            validation_loss: validation,
        });
        if validation > config.overfit_scale * train && epoch > config.min_epochs {
            return Ok(TrainingCurve {
                member,
                records,
                reason: StopReason::Overfit,
            });
        }
    }
    Ok(TrainingCurve {
        member,
        records,
        reason: StopReason::MaxEpochs,
    })
}

/// Loss of a fixed predictor on `set`, evaluated in chunks without gradients.
pub fn evaluate_loss(
    predictor: &RewardPredictor,
    set: &[PreferenceTriple],
    chunk: usize,
) -> Result<f64, TrainerError> {
    if set.is_empty() {
        return Err(PreferenceError::EmptyBatch.into());
    }
    let eps = predictor.config().noise_rate;
    let mut total = 0.0;
    for part in set.chunks(chunk.max(1)) {
        let refs: Vec<&PreferenceTriple> = part.iter().collect();
        let mut tape = Tape::new();
        let loss = preference_loss(&mut tape, predictor, &refs, eps)?;
        total += tape.value(loss).item().unwrap_or(f64::NAN) * part.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Trains one member in place with Adam on mini-batches; returns its curve.
pub fn train_member<R: Rng + ?Sized>(
    predictor: &mut RewardPredictor,
    train: &[PreferenceTriple],
    validation: &[PreferenceTriple],
    config: &TrainerConfig,
    member: usize,
    rng: &mut R,
) -> Result<TrainingCurve, TrainerError> {
    if train.is_empty() || validation.is_empty() {
        return Err(PreferenceError::EmptyBatch.into());
    }
    let eps = predictor.config().noise_rate;
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut order: Vec<usize> = (0..train.len()).collect();
    run_early_stopping(config, member, |_| {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let refs: Vec<&PreferenceTriple> = batch.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let loss = preference_loss(&mut tape, predictor, &refs, eps)?;
            let value = tape.value(loss).item().unwrap_or(f64::NAN);
            total += value * batch.len() as f64;
            if !value.is_finite() {
                break;
            }
            let grads = tape.backward(loss)?;
            predictor.zero_grad();
            predictor.accumulate_grads(&grads);
            adam.step(predictor)?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = evaluate_loss(predictor, validation, config.batch_size)?;
        Ok((train_loss, val_loss))
    })
}

/// Indices of the `c` smallest losses, ties broken by lower index, in
/// ascending loss order.
pub fn select_indices(losses: &[f64], c: usize) -> Result<Vec<usize>, TrainerError> {
    if c == 0 || losses.len() < c {
        return Err(TrainerError::NotEnoughMembers {
            needed: c.max(1),
            found: losses.len(),
        });
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    order.truncate(c);
    Ok(order)
}

/// Mean of the selected reward predictors.
#[derive(Clone, Debug)]
pub struct EnsemblePredictor {
    members: Vec<RewardPredictor>,
    validation_losses: Vec<f64>,
}

impl EnsemblePredictor {
    /// Members must share one config and normalization; they are kept in the given order.
    pub fn new(members: Vec<RewardPredictor>, validation_losses: Vec<f64>) -> Result<Self, TrainerError> {
        if members.is_empty() {
            return Err(TrainerError::NotEnoughMembers { needed: 1, found: 0 });
        }
        if validation_losses.len() != members.len() {
            return Err(TrainerError::Config("one validation loss per member is required".into()));
        }
        let first = &members[0];
        if members
            .iter()
            .any(|m| m.config() != first.config() || m.stats() != first.stats())
        {
            return Err(TrainerError::ConfigMismatch);
        }
        Ok(Self {
            members,
            validation_losses,
        })
    }

    pub fn members(&self) -> &[RewardPredictor] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [RewardPredictor] {
        &mut self.members
    }

    pub fn validation_losses(&self) -> &[f64] {
        &self.validation_losses
    }

    pub fn config(&self) -> &PredictorConfig {
        self.members[0].config()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn mean_of(&self, outputs: Vec<Vec<f64>>) -> Vec<f64> {
        let n = self.members.len() as f64;
        let mut acc = vec![0.0; outputs[0].len()];
        for out in &outputs {
            for (a, v) in acc.iter_mut().zip(out) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Per-step mean over members.
    pub fn predict(&self, segment: &crate::preference::TrajectorySegment) -> Result<Vec<f64>, TrainerError> {
        let outs = self
            .members
            .iter()
            .map(|m| m.predict_step_rewards(segment))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.mean_of(outs))
    }

    /// Mean member reward for live trailing windows.
    pub fn predict_windows(&self, windows: &[&[Vec<f64>]]) -> Result<Vec<f64>, TrainerError> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let outs = self
            .members
            .iter()
            .map(|m| m.predict_windows(windows))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.mean_of(outs))
    }

    /// Adjusted cross-entropy of the ensemble reward on `set`.
    pub fn loss(&self, set: &[PreferenceTriple]) -> Result<f64, TrainerError> {
        let pairs = set
            .iter()
            .map(|t| Ok((self.predict(&t.segment_a)?, self.predict(&t.segment_b)?, t.label())))
            .collect::<Result<Vec<_>, TrainerError>>()?;
        Ok(loss_from_rewards(&pairs, self.config().noise_rate)?)
    }
}

/// Keeps the `c` members with the smallest validation losses.
pub fn select_and_ensemble(
    members: Vec<(RewardPredictor, f64)>,
    c: usize,
) -> Result<EnsemblePredictor, TrainerError> {
    let losses: Vec<f64> = members.iter().map(|(_, l)| *l).collect();
    let keep = select_indices(&losses, c)?;
    let mut slots: Vec<Option<RewardPredictor>> = members.into_iter().map(|(p, _)| Some(p)).collect();
    let chosen = keep.iter().map(|&i| slots[i].take().expect("unique index")).collect();
    EnsemblePredictor::new(chosen, keep.iter().map(|&i| losses[i]).collect())
}

/// Result of a full pool run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub ensemble: EnsemblePredictor,
    pub curves: Vec<TrainingCurve>,
    /// Pool indices of the kept members, best first.
    pub selected: Vec<usize>,
}

/// Splits `dataset`, trains the pool and keeps the best members.
///
/// Every random choice derives from `seed`, so the outcome is reproducible
/// and independent of `config.workers`.
pub fn train_ensemble(
    dataset: &[PreferenceTriple],
    predictor: &PredictorConfig,
    config: &TrainerConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainerError> {
    config.validate()?;
    let (train, validation) = split_dataset(dataset, config.validation_fraction, &mut rng_for(seed, Stream::DatasetSplit, 0))?;
    let mut pcfg = predictor.clone();
    let dim = train[0].segment_a.feature_dim(pcfg.include_actions);
    if pcfg.input_dim == 0 {
        pcfg.input_dim = dim;
    }
    let stats = FeatureStats::from_segments(
        train.iter().flat_map(|t| [&t.segment_a, &t.segment_b]),
        pcfg.include_actions,
    );
    if stats.dim() != pcfg.input_dim {
        return Err(PreferenceError::FeatureDim {
            expected: pcfg.input_dim,
            found: stats.dim(),
        }
        .into());
    }

    let run_member = |m: usize| -> Result<(RewardPredictor, TrainingCurve), TrainerError> {
        let mut init = rng_for(seed, Stream::PredictorInit, m as u64);
        let mut p = RewardPredictor::new(pcfg.clone(), stats.clone(), &mut init)?;
        let mut shuffle = rng_for(seed, Stream::MemberShuffle, m as u64);
        let curve = train_member(&mut p, &train, &validation, config, m, &mut shuffle)?;
        log::debug!(
            "member {m}: stopped at epoch {} ({:?}), validation loss {:.5}",
            curve.stop_epoch(),
            curve.reason,
            curve.final_validation_loss()
        );
        Ok((p, curve))
    };

    let mut results: Vec<Option<Result<(RewardPredictor, TrainingCurve), TrainerError>>> =
        (0..config.pool_size).map(|_| None).collect();
    if config.workers <= 1 {
        for (m, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_member(m));
        }
    } else {
        for chunk in results.chunks_mut(config.workers).enumerate() {
            let (ci, slots) = chunk;
            std::thread::scope(|s| {
                for (j, slot) in slots.iter_mut().enumerate() {
                    let m = ci * config.workers + j;
                    let run = &run_member;
                    s.spawn(move || *slot = Some(run(m)));
                }
            });
        }
    }

    let mut members = Vec::with_capacity(config.pool_size);
    let mut curves = Vec::with_capacity(config.pool_size);
    for r in results {
        let (p, curve) = r.expect("every member ran")?;
        members.push((p, curve.final_validation_loss()));
        curves.push(curve);
    }
    let losses: Vec<f64> = members.iter().map(|(_, l)| *l).collect();
    let selected = select_indices(&losses, config.selected)?;
    let ensemble = select_and_ensemble(members, config.selected)?;
    Ok(TrainOutcome {
        ensemble,
        curves,
        selected,
    })
}

/// Writes `member,epoch,train_loss,validation_loss` rows.
pub fn write_curves_csv<W: Write>(out: W, curves: &[TrainingCurve]) -> Result<(), TrainerError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| TrainerError::Io(e.to_string());
    w.write_record(["member", "epoch", "train_loss", "validation_loss", "stop_reason"])
        .map_err(io)?;
    for c in curves {
        let reason = match c.reason {
            StopReason::Overfit => "overfit",
            StopReason::MaxEpochs => "max_epochs",
        };
        for r in &c.records {
            w.write_record([
                c.member.to_string(),
                r.epoch.to_string(),
                format!("{:.9}", r.train_loss),
                format!("{:.9}", r.validation_loss),
                reason.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| TrainerError::Io(e.to_string()))
}
