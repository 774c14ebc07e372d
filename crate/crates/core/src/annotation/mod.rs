//! Raw labels, prompt rendering and the three annotator backends.

mod llm;
mod oracle;
mod prompt;
mod replay;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preference::{PreferenceTriple, SegmentError, TrajectorySegment};

pub use llm::{LlmAnnotator, LlmConfig, API_KEY_ENV};
pub use oracle::{Criterion, CriterionFeature, OracleAnnotator, OracleConfig, OracleStage};
pub use prompt::{example_list, render_prompt, ChannelDoc, Prompt, PromptConfig, PromptTemplate};
pub use replay::{pair_hash, ReplayAnnotator, ReplayRecord};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("raw label {0} outside 0..=3")]
    InvalidLabel(i64),
    #[error("reply contains no bracketed integer list")]
    NoList,
    #[error("reply list has {found} labels, expected {expected}")]
    WrongLength { expected: usize, found: usize },
    #[error("reply label {0} outside 0..=3")]
    OutOfRange(i64),
    #[error("reply entry `{0}` is not an integer")]
    NotInteger(String),
    #[error("segment lacks channel `{0}` referenced by the prompt")]
    MissingChannel(String),
    #[error("template: {0}")]
    Template(String),
    #[error("criterion `{0}` produced a non-finite value")]
    NonFiniteFeature(String),
    #[error("criterion needs channel: {0}")]
    Criterion(String),
    #[error("replay file has no label for pair {0}")]
    MissingReplay(String),
    #[error("replay file line {line}: {message}")]
    ReplayFormat { line: usize, message: String },
    #[error("annotator endpoint unreachable after {attempts} attempts: {message}")]
    Unreachable { attempts: usize, message: String },
    #[error("annotator config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

/// Annotator verdict on one pair: 0 first better, 1 second better,
/// 2 equally preferable, 3 incomparable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct RawLabel(u8);

impl RawLabel {
    pub const FIRST: RawLabel = RawLabel(0);
    pub const SECOND: RawLabel = RawLabel(1);
    pub const EQUAL: RawLabel = RawLabel(2);
    pub const INCOMPARABLE: RawLabel = RawLabel(3);

    pub fn new(value: i64) -> Result<Self, AnnotationError> {
        match value {
            0..=3 => Ok(Self(value as u8)),
            _ => Err(AnnotationError::InvalidLabel(value)),
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for RawLabel {
    type Error = AnnotationError;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<RawLabel> for i64 {
    fn from(l: RawLabel) -> i64 {
        i64::from(l.0)
    }
}

impl fmt::Display for RawLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Training label for a raw verdict; incomparable pairs map to `None`.
pub fn map_label(raw: RawLabel) -> Option<f64> {
    match raw.0 {
        0 => Some(0.0),
        1 => Some(1.0),
        2 => Some(0.5),
        _ => None,
    }
}

fn list_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]*[0-9][^\[\]]*)\]").expect("valid regex"))
}

/// Extracts the first bracketed list of numbers from a reply.
pub fn parse_label_list(reply: &str, expected: usize) -> Result<Vec<RawLabel>, AnnotationError> {
    let caps = list_regex().captures(reply).ok_or(AnnotationError::NoList)?;
    let body = caps.get(1).map_or("", |m| m.as_str());
    let mut out = Vec::new();
    for token in body.split(',') {
        let token = token.trim();
        let v: i64 = token
            .parse()
            .map_err(|_| AnnotationError::NotInteger(token.to_string()))?;
        if !(0..=3).contains(&v) {
            return Err(AnnotationError::OutOfRange(v));
        }
        out.push(RawLabel(v as u8));
    }
    if out.len() != expected {
        return Err(AnnotationError::WrongLength {
            expected,
            found: out.len(),
        });
    }
    Ok(out)
}

/// Most frequent label; a tie for the top count gives 2.
pub fn aggregate_mode(samples: &[RawLabel]) -> Option<RawLabel> {
    if samples.is_empty() {
        return None;
    }
    let mut counts = [0usize; 4];
    for s in samples {
        counts[s.0 as usize] += 1;
    }
    let top = *counts.iter().max().expect("four counts");
    let winners: Vec<usize> = (0..4).filter(|&i| counts[i] == top).collect();
    if winners.len() > 1 {
        Some(RawLabel::EQUAL)
    } else {
        Some(RawLabel(winners[0] as u8))
    }
}

/// A pair waiting for a label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentPair {
    pub segment_a: TrajectorySegment,
    pub segment_b: TrajectorySegment,
}

impl SegmentPair {
    pub fn new(segment_a: TrajectorySegment, segment_b: TrajectorySegment) -> Self {
        Self {
            segment_a,
            segment_b,
        }
    }
}

/// Counts of one labeling pass. `labeled + discarded == annotated`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTally {
    pub annotated: usize,
    pub labeled: usize,
    pub discarded: usize,
    /// Occurrences of raw labels 0..=3.
    pub by_raw: [usize; 4],
}

impl LabelTally {
    pub fn record(&mut self, raw: RawLabel) {
        self.annotated += 1;
        self.by_raw[raw.0 as usize] += 1;
        if map_label(raw).is_some() {
            self.labeled += 1;
        } else {
            self.discarded += 1;
        }
    }

    pub fn merge(&mut self, other: &LabelTally) {
        self.annotated += other.annotated;
        self.labeled += other.labeled;
        self.discarded += other.discarded;
        for i in 0..4 {
            self.by_raw[i] += other.by_raw[i];
        }
    }
}

/// Turns raw verdicts into triples, dropping incomparable pairs.
pub fn to_triples(
    pairs: &[SegmentPair],
    labels: &[RawLabel],
) -> Result<(Vec<PreferenceTriple>, LabelTally), AnnotationError> {
    if pairs.len() != labels.len() {
        return Err(AnnotationError::WrongLength {
            expected: pairs.len(),
            found: labels.len(),
        });
    }
    let mut tally = LabelTally::default();
    let mut triples = Vec::with_capacity(pairs.len());
    for (pair, &raw) in pairs.iter().zip(labels) {
        tally.record(raw);
        if let Some(y) = map_label(raw) {
            triples.push(PreferenceTriple::new(pair.segment_a.clone(), pair.segment_b.clone(), y)?);
        }
    }
    Ok((triples, tally))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Oracle,
    Replay,
    Llm,
}

impl std::str::FromStr for Backend {
    type Err = AnnotationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(Backend::Oracle),
            "replay" => Ok(Backend::Replay),
            "llm" => Ok(Backend::Llm),
            other => Err(AnnotationError::Config(format!("unknown annotator backend `{other}`"))),
        }
    }
}

fn d_backend() -> Backend {
    Backend::Oracle
}
fn d_samples() -> usize {
    15
}
fn d_batch() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorConfig {
    #[serde(default = "d_backend")]
    pub backend: Backend,
    /// Replies sampled per batch (n_s).
    #[serde(default = "d_samples")]
    pub samples_per_pair: usize,
    /// Pairs per prompt.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub replay_path: Option<PathBuf>,
    /// Fall back to the oracle when the LLM endpoint stays unreachable.
    #[serde(default)]
    pub fallback_to_oracle: bool,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            backend: d_backend(),
            samples_per_pair: d_samples(),
            batch_size: d_batch(),
            replay_path: None,
            fallback_to_oracle: false,
            oracle: OracleConfig::default(),
            llm: LlmConfig::default(),
            prompt: PromptConfig::default(),
        }
    }
}

impl AnnotatorConfig {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        if self.batch_size == 0 || self.samples_per_pair == 0 {
            return Err(AnnotationError::Config(
                "batch_size and samples_per_pair must be at least 1".into(),
            ));
        }
        if self.backend == Backend::Replay && self.replay_path.is_none() {
            return Err(AnnotationError::Config("the replay backend needs replay_path".into()));
        }
        self.oracle.validate()
    }
}

/// Any of the three backends.
#[derive(Debug)]
pub enum Annotator {
    Oracle(OracleAnnotator),
    Replay(ReplayAnnotator),
    Llm {
        client: LlmAnnotator,
        fallback: Option<OracleAnnotator>,
    },
}

impl Annotator {
    pub fn from_config(config: &AnnotatorConfig) -> Result<Self, AnnotationError> {
        config.validate()?;
        Ok(match config.backend {
            Backend::Oracle => Annotator::Oracle(OracleAnnotator::new(config.oracle.clone())),
            Backend::Replay => {
                let path = config.replay_path.as_ref().expect("validated");
                Annotator::Replay(ReplayAnnotator::load(path)?)
            }
            Backend::Llm => {
                let template = PromptTemplate::from_config(&config.prompt)?;
                Annotator::Llm {
                    client: LlmAnnotator::new(
                        config.llm.clone(),
                        template,
                        config.samples_per_pair,
                        config.batch_size,
                    )?,
                    fallback: config
                        .fallback_to_oracle
                        .then(|| OracleAnnotator::new(config.oracle.clone())),
                }
            }
        })
    }

    pub fn backend(&self) -> Backend {
        match self {
            Annotator::Oracle(_) => Backend::Oracle,
            Annotator::Replay(_) => Backend::Replay,
            Annotator::Llm { .. } => Backend::Llm,
        }
    }
}

/// Anything that can judge segment pairs.
pub trait PairLabeler {
    /// One raw verdict per pair. `stage` counts predictor refreshes (0 for
    /// the bootstrap) and selects the oracle criteria.
    fn annotate(&self, pairs: &[SegmentPair], stage: usize) -> Result<Vec<RawLabel>, AnnotationError>;

    /// Annotates and converts to triples in one pass.
    fn label(
        &self,
        pairs: &[SegmentPair],
        stage: usize,
    ) -> Result<(Vec<PreferenceTriple>, LabelTally), AnnotationError> {
        let raw = self.annotate(pairs, stage)?;
        to_triples(pairs, &raw)
    }
}

impl PairLabeler for Annotator {
    fn annotate(&self, pairs: &[SegmentPair], stage: usize) -> Result<Vec<RawLabel>, AnnotationError> {
        match self {
            Annotator::Oracle(o) => pairs.iter().map(|p| o.annotate(p, stage)).collect(),
            Annotator::Replay(r) => pairs.iter().map(|p| r.annotate(p)).collect(),
            Annotator::Llm { client, fallback } => match client.annotate(pairs) {
                Err(e @ AnnotationError::Unreachable { .. }) => match fallback {
                    Some(o) => {
                        log::warn!("{e}; labeling this batch with the oracle");
                        pairs.iter().map(|p| o.annotate(p, stage)).collect()
                    }
                    None => Err(e),
                },
                other => other,
            },
        }
    }
}

/// Raw labels keyed by pair hash, as written by `annotate` runs.
pub fn replay_records(pairs: &[SegmentPair], labels: &[RawLabel]) -> Vec<ReplayRecord> {
    pairs
        .iter()
        .zip(labels)
        .map(|(p, &label)| ReplayRecord {
            pair_hash: format!("{:016x}", pair_hash(&p.segment_a, &p.segment_b)),
            label,
        })
        .collect()
}

pub(crate) fn channel_widths(segment: &TrajectorySegment) -> BTreeMap<String, usize> {
    segment.schema().into_iter().collect()
}
