use serde::{Deserialize, Serialize};

use super::{AnnotationError, RawLabel, SegmentPair};
use crate::envs::{cadence, sync_error, tracking_error};
use crate::preference::TrajectorySegment;

/// A scalar summary of a segment used by the scripted annotator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CriterionFeature {
    /// Mean |command − forward velocity|.
    TrackingError,
    SyncError,
    Cadence,
    /// Mean of one component of a channel.
    ChannelMean { channel: String, index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Criterion {
    pub feature: CriterionFeature,
    pub weight: f64,
}

impl Criterion {
    pub fn new(feature: CriterionFeature, weight: f64) -> Self {
        Self { feature, weight }
    }

    fn name(&self) -> String {
        match &self.feature {
            CriterionFeature::TrackingError => "tracking_error".into(),
            CriterionFeature::SyncError => "sync_error".into(),
            CriterionFeature::Cadence => "cadence".into(),
            CriterionFeature::ChannelMean { channel, index } => format!("{channel}[{index}]"),
        }
    }

    fn value(&self, seg: &TrajectorySegment, dt: f64) -> Result<f64, AnnotationError> {
        let crit = |e: crate::envs::EnvError| AnnotationError::Criterion(e.to_string());
        let v = match &self.feature {
            CriterionFeature::TrackingError => tracking_error(seg).map_err(crit)?,
            CriterionFeature::SyncError => sync_error(seg).map_err(crit)?,
            CriterionFeature::Cadence => cadence(seg, dt).map_err(crit)?,
            CriterionFeature::ChannelMean { channel, index } => {
                let rows = seg
                    .channel(channel)
                    .ok_or_else(|| AnnotationError::Criterion(channel.clone()))?;
                if rows.first().is_none_or(|r| *index >= r.len()) {
                    return Err(AnnotationError::Criterion(format!("{channel}[{index}]")));
                }
                rows.iter().map(|r| r[*index]).sum::<f64>() / rows.len() as f64
            }
        };
        if !v.is_finite() {
            return Err(AnnotationError::NonFiniteFeature(self.name()));
        }
        Ok(v)
    }
}

/// Criteria that take over from a given predictor-update cycle onward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleStage {
    pub from_stage: usize,
    pub criteria: Vec<Criterion>,
}

fn d_tol() -> f64 {
    0.02
}
fn d_dt() -> f64 {
    0.05
}
fn d_criteria() -> Vec<Criterion> {
    vec![Criterion::new(CriterionFeature::TrackingError, -1.0)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "d_criteria")]
    pub criteria: Vec<Criterion>,
    /// Score gaps at or below this are called equal.
    #[serde(default = "d_tol")]
    pub tie_tolerance: f64,
    /// Step length used by the cadence criterion.
    #[serde(default = "d_dt")]
    pub dt: f64,
    /// Later stages replace `criteria` once their `from_stage` is reached.
    #[serde(default)]
    pub schedule: Vec<OracleStage>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            criteria: d_criteria(),
            tie_tolerance: d_tol(),
            dt: d_dt(),
            schedule: Vec::new(),
        }
    }
}

impl OracleConfig {
    pub fn with_criteria(criteria: Vec<Criterion>, tie_tolerance: f64) -> Self {
        Self {
            criteria,
            tie_tolerance,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        if !(self.tie_tolerance >= 0.0) || !(self.dt > 0.0) {
            return Err(AnnotationError::Config(
                "oracle tie_tolerance must be >= 0 and dt > 0".into(),
            ));
        }
        if self.criteria.iter().chain(self.schedule.iter().flat_map(|s| &s.criteria)).any(|c| !c.weight.is_finite()) {
            return Err(AnnotationError::Config("oracle weights must be finite".into()));
        }
        Ok(())
    }

    pub fn criteria_for(&self, stage: usize) -> &[Criterion] {
        self.schedule
            .iter()
            .filter(|s| s.from_stage <= stage)
            .max_by_key(|s| s.from_stage)
            .map_or(&self.criteria, |s| &s.criteria)
    }
}

/// Scripted stand-in for a language-model annotator.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleAnnotator {
    config: OracleConfig,
}

impl OracleAnnotator {
    pub fn new(config: OracleConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn score(&self, seg: &TrajectorySegment, stage: usize) -> Result<f64, AnnotationError> {
        let mut s = 0.0;
        for c in self.config.criteria_for(stage) {
            s += c.weight * c.value(seg, self.config.dt)?;
        }
        Ok(s)
    }

    /// 0 or 1 for the higher-scoring segment, 2 within the tie tolerance. Never 3.
    pub fn annotate(&self, pair: &SegmentPair, stage: usize) -> Result<RawLabel, AnnotationError> {
        let a = self.score(&pair.segment_a, stage)?;
        let b = self.score(&pair.segment_b, stage)?;
        Ok(if (a - b).abs() <= self.config.tie_tolerance {
            RawLabel::EQUAL
        } else if a > b {
            RawLabel::FIRST
        } else {
            RawLabel::SECOND
        })
    }
}
