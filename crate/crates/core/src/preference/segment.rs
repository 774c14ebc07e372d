use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("segment has no steps")]
    Empty,
    #[error("channel `{channel}` has {found} steps, expected {expected}")]
    LengthMismatch {
        channel: String,
        expected: usize,
        found: usize,
    },
    #[error("channel `{0}` has rows of differing width")]
    RaggedWidth(String),
    #[error("channel `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("contact channel `{0}` contains a value other than 0 or 1")]
    NonBinaryContact(String),
    #[error("label {0} is not one of 0, 0.5, 1")]
    InvalidLabel(f64),
}

/// True for channels holding binary foot-contact flags.
pub fn is_contact_channel(name: &str) -> bool {
    name.ends_with("contacts")
}

/// A fixed-length window of per-step named channels plus actions.
///
/// Channel rows are stored per step; channels iterate in name order, which
/// also fixes the predictor's feature layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSegment", into = "RawSegment")]
pub struct TrajectorySegment {
    channels: BTreeMap<String, Vec<Vec<f64>>>,
    actions: Vec<Vec<f64>>,
    episode: u64,
    start: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    channels: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default)]
    actions: Vec<Vec<f64>>,
    #[serde(default)]
    episode: u64,
    #[serde(default)]
    start: usize,
}

impl TryFrom<RawSegment> for TrajectorySegment {
    type Error = SegmentError;

    fn try_from(raw: RawSegment) -> Result<Self, Self::Error> {
        Self::new(raw.channels, raw.actions, raw.episode, raw.start)
    }
}

impl From<TrajectorySegment> for RawSegment {
    fn from(s: TrajectorySegment) -> Self {
        Self {
            channels: s.channels,
            actions: s.actions,
            episode: s.episode,
            start: s.start,
        }
    }
}

fn check_rows(name: &str, rows: &[Vec<f64>], len: usize) -> Result<(), SegmentError> {
    if rows.len() != len {
        return Err(SegmentError::LengthMismatch {
            channel: name.to_string(),
            expected: len,
            found: rows.len(),
        });
    }
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(SegmentError::RaggedWidth(name.to_string()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(SegmentError::NonFinite(name.to_string()));
    }
    Ok(())
}

impl TrajectorySegment {
    /// `actions` may be empty for segments recorded without actions.
    pub fn new(
        channels: BTreeMap<String, Vec<Vec<f64>>>,
        actions: Vec<Vec<f64>>,
        episode: u64,
        start: usize,
    ) -> Result<Self, SegmentError> {
        let len = channels.values().next().map_or(0, Vec::len);
        if len == 0 {
            return Err(SegmentError::Empty);
        }
        for (name, rows) in &channels {
            check_rows(name, rows, len)?;
            if is_contact_channel(name) && rows.iter().flatten().any(|&v| v != 0.0 && v != 1.0) {
                return Err(SegmentError::NonBinaryContact(name.clone()));
            }
        }
        let actions = if actions.is_empty() {
            vec![Vec::new(); len]
        } else {
            check_rows("actions", &actions, len)?;
            actions
        };
        Ok(Self {
            channels,
            actions,
            episode,
            start,
        })
    }

    /// Number of steps `H`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn channel(&self, name: &str) -> Option<&[Vec<f64>]> {
        self.channels.get(name).map(Vec::as_slice)
    }

    pub fn channels(&self) -> &BTreeMap<String, Vec<Vec<f64>>> {
        &self.channels
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    /// `(name, width)` for every channel, in feature order.
    pub fn schema(&self) -> Vec<(String, usize)> {
        self.channels
            .iter()
            .map(|(k, rows)| (k.clone(), rows.first().map_or(0, Vec::len)))
            .collect()
    }

    pub fn feature_dim(&self, include_actions: bool) -> usize {
        let state: usize = self.schema().iter().map(|(_, w)| w).sum();
        state + if include_actions { self.action_dim() } else { 0 }
    }

    /// Per-step feature vectors: channels in name order, then actions if requested.
    pub fn features(&self, include_actions: bool) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|t| {
                feature_row(
                    self.channels.values().map(|rows| rows[t].as_slice()),
                    include_actions.then_some(self.actions[t].as_slice()),
                )
            })
            .collect()
    }
}

/// One step's feature vector from its channel values (already in name order)
/// and, optionally, its action.
pub fn feature_row<'a>(channels: impl Iterator<Item = &'a [f64]>, action: Option<&[f64]>) -> Vec<f64> {
    let mut row: Vec<f64> = channels.flat_map(|c| c.iter().copied()).collect();
    if let Some(a) = action {
        row.extend_from_slice(a);
    }
    row
}

/// Two segments and a preference label `y` (0: first preferred, 1: second
/// preferred, 0.5: equally preferable).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTriple", into = "RawTriple")]
pub struct PreferenceTriple {
    pub segment_a: TrajectorySegment,
    pub segment_b: TrajectorySegment,
    label: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTriple {
    segment_a: TrajectorySegment,
    segment_b: TrajectorySegment,
    label: f64,
}

impl TryFrom<RawTriple> for PreferenceTriple {
    type Error = SegmentError;

    fn try_from(raw: RawTriple) -> Result<Self, Self::Error> {
        Self::new(raw.segment_a, raw.segment_b, raw.label)
    }
}

impl From<PreferenceTriple> for RawTriple {
    fn from(t: PreferenceTriple) -> Self {
        Self {
            segment_a: t.segment_a,
            segment_b: t.segment_b,
            label: t.label,
        }
    }
}

impl PreferenceTriple {
    pub fn new(
        segment_a: TrajectorySegment,
        segment_b: TrajectorySegment,
        label: f64,
    ) -> Result<Self, SegmentError> {
        if label != 0.0 && label != 0.5 && label != 1.0 {
            return Err(SegmentError::InvalidLabel(label));
        }
        Ok(Self {
            segment_a,
            segment_b,
            label,
        })
    }

    pub fn label(&self) -> f64 {
        self.label
    }
}
