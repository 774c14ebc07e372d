//! Trajectory segments, reward predictors and the noise-adjusted
//! Bradley-Terry preference loss.

mod predictor;
mod segment;

use thiserror::Error;

use crate::numerics::{DenseArray, NumericsError, Tape, Var};

pub use predictor::{FeatureStats, PredictorArch, PredictorConfig, RewardMode, RewardPredictor};
pub use segment::{feature_row, is_contact_channel, PreferenceTriple, SegmentError, TrajectorySegment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreferenceError {
    #[error("feature dimension mismatch: predictor expects {expected}, segment has {found}")]
    FeatureDim { expected: usize, found: usize },
    #[error("empty preference batch")]
    EmptyBatch,
    #[error("noise rate {0} outside [0, 0.5)")]
    InvalidNoiseRate(f64),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("predictor config: {0}")]
    Config(String),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `P(a ≻ b)` from segment returns, in the overflow-free logistic form.
pub fn bt_probability(return_a: f64, return_b: f64) -> f64 {
    1.0 / (1.0 + (return_b - return_a).exp())
}

/// Mixes the model probability with a uniform coin flip at rate `noise_rate`.
pub fn adjust_probability(p: f64, noise_rate: f64) -> Result<f64, PreferenceError> {
    if !(0.0..0.5).contains(&noise_rate) {
        return Err(PreferenceError::InvalidNoiseRate(noise_rate));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(PreferenceError::InvalidProbability(p));
    }
    // Written as a pull toward 1/2 so the endpoints land exactly on
    // ε/2 and 1 − ε/2.
    Ok(p + noise_rate * (0.5 - p))
}

/// Cross-entropy of one labeled pair under the adjusted probability.
pub fn pair_loss(return_a: f64, return_b: f64, label: f64, noise_rate: f64) -> Result<f64, PreferenceError> {
    let p = adjust_probability(bt_probability(return_a, return_b), noise_rate)?;
    Ok(-((1.0 - label) * p.ln() + label * (1.0 - p).ln()))
}

/// Mean adjusted cross-entropy over a batch, recorded on `tape`.
pub fn preference_loss(
    tape: &mut Tape,
    predictor: &RewardPredictor,
    batch: &[&PreferenceTriple],
    noise_rate: f64,
) -> Result<Var, PreferenceError> {
    if batch.is_empty() {
        return Err(PreferenceError::EmptyBatch);
    }
    if !(0.0..0.5).contains(&noise_rate) {
        return Err(PreferenceError::InvalidNoiseRate(noise_rate));
    }
    let n = batch.len();
    let segments: Vec<&TrajectorySegment> = batch
        .iter()
        .map(|t| &t.segment_a)
        .chain(batch.iter().map(|t| &t.segment_b))
        .collect();
    let returns = predictor.segment_returns(tape, &segments)?;
    let ra = tape.gather_rows(returns, (0..n).collect())?;
    let rb = tape.gather_rows(returns, (n..2 * n).collect())?;
    let gap = tape.sub(ra, rb)?;
    let p = tape.sigmoid(gap);
    let keep = 1.0 - noise_rate;
    let p_a = tape.affine(p, keep, 0.5 * noise_rate);
    let p_b = tape.affine(p, -keep, 1.0 - 0.5 * noise_rate);
    let log_a = tape.log(p_a);
    let log_b = tape.log(p_b);
    let w_a = tape.constant(DenseArray::new(
        vec![n, 1],
        batch.iter().map(|t| 1.0 - t.label()).collect(),
    )?);
    let w_b = tape.constant(DenseArray::new(
        vec![n, 1],
        batch.iter().map(|t| t.label()).collect(),
    )?);
    let term_a = tape.mul(log_a, w_a)?;
    let term_b = tape.mul(log_b, w_b)?;
    let total = tape.add(term_a, term_b)?;
    let mean = tape.mean(total);
    Ok(tape.neg(mean))
}

/// Mean adjusted cross-entropy from precomputed per-step rewards of each
/// segment pair, without recording a tape.
pub fn loss_from_rewards(
    pairs: &[(Vec<f64>, Vec<f64>, f64)],
    noise_rate: f64,
) -> Result<f64, PreferenceError> {
    if pairs.is_empty() {
        return Err(PreferenceError::EmptyBatch);
    }
    let mut total = 0.0;
    for (a, b, y) in pairs {
        total += pair_loss(a.iter().sum(), b.iter().sum(), *y, noise_rate)?;
    }
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests;
