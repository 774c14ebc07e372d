use std::collections::HashMap;
use std::hash::Hasher;
use std::io::{BufRead, BufReader};
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::{AnnotationError, RawLabel, SegmentPair};
use crate::preference::TrajectorySegment;

/// FNV-1a 64 over the JSON bytes of `a` followed by those of `b`.
pub fn pair_hash(a: &TrajectorySegment, b: &TrajectorySegment) -> u64 {
    let mut h = FnvHasher::default();
    for seg in [a, b] {
        let bytes = serde_json::to_vec(seg).expect("segments always serialize");
        h.write(&bytes);
    }
    h.finish()
}

/// One line of a replay file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayRecord {
    pub pair_hash: String,
    pub label: RawLabel,
}

/// Looks labels up by pair hash.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayAnnotator {
    labels: HashMap<u64, RawLabel>,
}

impl ReplayAnnotator {
    pub fn from_records(records: &[ReplayRecord]) -> Result<Self, AnnotationError> {
        let mut labels = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let key = u64::from_str_radix(&r.pair_hash, 16).map_err(|e| AnnotationError::ReplayFormat {
                line: i + 1,
                message: format!("bad pair_hash `{}`: {e}", r.pair_hash),
            })?;
            labels.insert(key, r.label);
        }
        Ok(Self { labels })
    }

    pub fn load(path: &Path) -> Result<Self, AnnotationError> {
        let file = std::fs::File::open(path)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReplayRecord = serde_json::from_str(&line).map_err(|e| AnnotationError::ReplayFormat {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::from_records(&records)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn annotate(&self, pair: &SegmentPair) -> Result<RawLabel, AnnotationError> {
        let h = pair_hash(&pair.segment_a, &pair.segment_b);
        self.labels
            .get(&h)
            .copied()
            .ok_or_else(|| AnnotationError::MissingReplay(format!("{h:016x}")))
    }
}
