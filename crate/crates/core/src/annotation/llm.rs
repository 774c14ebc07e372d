use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{aggregate_mode, parse_label_list, render_prompt, AnnotationError, Prompt, PromptTemplate, RawLabel, SegmentPair};

/// Environment variable holding the bearer token for the annotator endpoint.
pub const API_KEY_ENV: &str = "ANNOTATOR_API_KEY";

fn d_url() -> String {
    "http://127.0.0.1:8080/annotate".into()
}
fn d_temp() -> f64 {
    1.0
}
fn d_retries() -> usize {
    3
}
fn d_timeout() -> u64 {
    60
}
fn d_in_flight() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    #[serde(default = "d_url")]
    pub base_url: String,
    /// Forwarded as `model` when non-empty.
    #[serde(default)]
    pub model: String,
    #[serde(default = "d_temp")]
    pub temperature: f64,
    #[serde(default = "d_retries")]
    pub max_retries: usize,
    #[serde(default = "d_timeout")]
    pub timeout_secs: u64,
    /// Upper bound on concurrent requests.
    #[serde(default = "d_in_flight")]
    pub max_in_flight: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: d_url(),
            model: String::new(),
            temperature: d_temp(),
            max_retries: d_retries(),
            timeout_secs: d_timeout(),
            max_in_flight: d_in_flight(),
        }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    system: &'a str,
    user: &'a str,
    temperature: f64,
    #[serde(skip_serializing_if = "str::is_empty")]
    model: &'a str,
}

#[derive(Deserialize)]
struct Reply {
    text: String,
}

enum Failure {
    Transport(String),
    Unparseable(String),
}

/// Queries an HTTP endpoint `n_s` times per batch and takes per-pair modes.
pub struct LlmAnnotator {
    config: LlmConfig,
    template: PromptTemplate,
    samples: usize,
    batch_size: usize,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl fmt::Debug for LlmAnnotator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmAnnotator")
            .field("config", &self.config)
            .field("samples", &self.samples)
            .field("batch_size", &self.batch_size)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl LlmAnnotator {
    pub fn new(
        config: LlmConfig,
        template: PromptTemplate,
        samples: usize,
        batch_size: usize,
    ) -> Result<Self, AnnotationError> {
        if samples == 0 || batch_size == 0 || config.max_in_flight == 0 {
            return Err(AnnotationError::Config(
                "samples, batch_size and max_in_flight must be positive".into(),
            ));
        }
        if !(config.temperature > 0.0) {
            return Err(AnnotationError::Config("sampling temperature must be positive".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(Self {
            config,
            template,
            samples,
            batch_size,
            agent,
            api_key,
        })
    }

    fn request(&self, prompt: &Prompt) -> Result<String, Failure> {
        let body = Request {
            system: &prompt.system,
            user: &prompt.user,
            temperature: self.config.temperature,
            model: &self.config.model,
        };
        let mut req = self.agent.post(&self.config.base_url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| Failure::Transport(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Transport(e.to_string()))?;
        serde_json::from_str::<Reply>(&text)
            .map(|r| r.text)
            .map_err(|e| Failure::Unparseable(format!("reply is not {{\"text\": ...}}: {e}")))
    }

    /// One sample: retries on any failure; a reply that never parses becomes
    /// all-2, an endpoint that never answers is an error.
    fn sample(&self, prompt: &Prompt, expected: usize) -> Result<Vec<RawLabel>, AnnotationError> {
        let attempts = self.config.max_retries + 1;
        let mut last = Failure::Transport("no attempt made".into());
        for attempt in 1..=attempts {
            let outcome = self
                .request(prompt)
                .and_then(|text| parse_label_list(&text, expected).map_err(|e| Failure::Unparseable(e.to_string())));
            match outcome {
                Ok(labels) => return Ok(labels),
                Err(f) => {
                    match &f {
                        Failure::Transport(m) => log::warn!("annotator request failed (attempt {attempt}/{attempts}): {m}"),
                        Failure::Unparseable(m) => log::warn!("annotator reply rejected (attempt {attempt}/{attempts}): {m}"),
                    }
                    last = f;
                }
            }
        }
        match last {
            Failure::Transport(message) => Err(AnnotationError::Unreachable { attempts, message }),
            Failure::Unparseable(_) => {
                log::warn!("substituting label 2 for an unparseable sample");
                Ok(vec![RawLabel::EQUAL; expected])
            }
        }
    }

    /// All `n_s` samples for one rendered batch, in sample order.
    fn sample_all(&self, prompt: &Prompt, expected: usize) -> Result<Vec<Vec<RawLabel>>, AnnotationError> {
        let mut out: Vec<Option<Result<Vec<RawLabel>, AnnotationError>>> = (0..self.samples).map(|_| None).collect();
        for wave in out.chunks_mut(self.config.max_in_flight) {
            std::thread::scope(|s| {
                for slot in wave.iter_mut() {
                    s.spawn(move || *slot = Some(self.sample(prompt, expected)));
                }
            });
        }
        out.into_iter().map(|r| r.expect("every sample ran")).collect()
    }

    /// One aggregated label per pair.
    pub fn annotate(&self, pairs: &[SegmentPair]) -> Result<Vec<RawLabel>, AnnotationError> {
        let mut labels = Vec::with_capacity(pairs.len());
        for batch in pairs.chunks(self.batch_size) {
            let prompt = render_prompt(&self.template, batch)?;
            let samples = self.sample_all(&prompt, batch.len())?;
            for i in 0..batch.len() {
                let votes: Vec<RawLabel> = samples.iter().map(|s| s[i]).collect();
                labels.push(aggregate_mode(&votes).expect("at least one sample"));
            }
        }
        Ok(labels)
    }
}
