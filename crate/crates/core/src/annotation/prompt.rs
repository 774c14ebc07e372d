use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{channel_widths, AnnotationError, SegmentPair};

/// Documentation of one channel shown to the annotator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDoc {
    pub name: String,
    pub shape: String,
    pub units: String,
    pub meaning: String,
}

impl ChannelDoc {
    fn new(name: &str, shape: &str, units: &str, meaning: &str) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            units: units.into(),
            meaning: meaning.into(),
        }
    }
}

const DEFAULT_TEMPLATE: &str = "\
You are helping to train a simulated four-legged walking robot. You will see \
short recordings of its motion, {{steps}} control steps each, arranged in \
numbered pairs. For every pair, decide which recording shows the better \
behavior.

Signals in each recording:
{{channel_docs}}

What good behavior looks like, most important first:
{{criteria}}

Answer every pair with one integer:
0 means Trajectory 0 is better.
1 means Trajectory 1 is better.
2 means they are about equally good.
3 means they cannot be compared.

There are {{pair_count}} pairs. End your reply with exactly one list of \
{{pair_count}} integers, for example {{example}}.";

fn d_precision() -> usize {
    3
}

fn default_channels() -> Vec<ChannelDoc> {
    vec![
        ChannelDoc::new("commands", "(1,)", "m/s", "target forward speed"),
        ChannelDoc::new(
            "base_linear_velocity",
            "(3,)",
            "m/s",
            "body velocity: forward, sideways, vertical",
        ),
        ChannelDoc::new("base_height", "(1,)", "m", "body height above the ground"),
        ChannelDoc::new(
            "base_roll_pitch_yaw",
            "(3,)",
            "rad",
            "body orientation angles",
        ),
        ChannelDoc::new(
            "feet_contacts",
            "(4,)",
            "0/1",
            "ground contact of the front-left, front-right, rear-left and rear-right feet",
        ),
    ]
}

fn default_criteria() -> Vec<String> {
    vec![
        "Forward velocity stays close to the commanded speed.".into(),
        "The body stays level and at a steady height.".into(),
        "Feet touch down in a regular, repeating pattern.".into(),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// Plain-text template file; the built-in text is used when absent.
    #[serde(default)]
    pub template_path: Option<PathBuf>,
    #[serde(default = "d_precision")]
    pub precision: usize,
    #[serde(default = "default_channels")]
    pub channels: Vec<ChannelDoc>,
    #[serde(default = "default_criteria")]
    pub criteria: Vec<String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template_path: None,
            precision: d_precision(),
            channels: default_channels(),
            criteria: default_criteria(),
        }
    }
}

/// Template text with `{{name}}` placeholders plus channel and criteria docs.
///
/// Recognized placeholders: `steps`, `channel_docs`, `criteria`,
/// `pair_count`, `example`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pub text: String,
    pub channels: Vec<ChannelDoc>,
    pub criteria: Vec<String>,
    pub precision: usize,
}

const PLACEHOLDERS: [&str; 5] = ["steps", "channel_docs", "criteria", "pair_count", "example"];

impl PromptTemplate {
    pub fn new(
        text: impl Into<String>,
        channels: Vec<ChannelDoc>,
        criteria: Vec<String>,
        precision: usize,
    ) -> Result<Self, AnnotationError> {
        let text = text.into();
        let mut rest = text.as_str();
        while let Some(open) = rest.find("{{") {
            let after = &rest[open + 2..];
            let close = after
                .find("}}")
                .ok_or_else(|| AnnotationError::Template("unclosed `{{`".into()))?;
            let name = &after[..close];
            if !PLACEHOLDERS.contains(&name) {
                return Err(AnnotationError::Template(format!("unknown placeholder `{name}`")));
            }
            rest = &after[close + 2..];
        }
        if channels.is_empty() {
            return Err(AnnotationError::Template("no channels documented".into()));
        }
        Ok(Self {
            text,
            channels,
            criteria,
            precision,
        })
    }

    pub fn builtin() -> Self {
        let cfg = PromptConfig::default();
        Self::new(DEFAULT_TEMPLATE, cfg.channels, cfg.criteria, cfg.precision).expect("built-in template is valid")
    }

    pub fn from_config(cfg: &PromptConfig) -> Result<Self, AnnotationError> {
        let text = match &cfg.template_path {
            Some(p) => std::fs::read_to_string(p)?,
            None => DEFAULT_TEMPLATE.to_string(),
        };
        Self::new(text, cfg.channels.clone(), cfg.criteria.clone(), cfg.precision)
    }

    /// Names of the documented channels.
    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|c| c.name.as_str())
    }
}

/// A rendered query: the instructions and the pair data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }
}

/// Example answer list shown in the instructions.
pub fn example_list(count: usize) -> String {
    const PATTERN: [u8; 5] = [0, 0, 1, 2, 3];
    let items: Vec<String> = (0..count).map(|i| PATTERN[i % 5].to_string()).collect();
    format!("[{}]", items.join(", "))
}

fn fmt_value(v: f64, precision: usize) -> String {
    let s = format!("{v:.precision$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Renders the instructions and the numbered pair blocks.
pub fn render_prompt(template: &PromptTemplate, pairs: &[SegmentPair]) -> Result<Prompt, AnnotationError> {
    let steps = pairs.first().map_or(0, |p| p.segment_a.len());
    for pair in pairs {
        for seg in [&pair.segment_a, &pair.segment_b] {
            let widths = channel_widths(seg);
            if let Some(missing) = template.channel_names().find(|n| !widths.contains_key(*n)) {
                return Err(AnnotationError::MissingChannel(missing.to_string()));
            }
        }
    }

    let mut docs = String::new();
    for c in &template.channels {
        let _ = writeln!(docs, "- {}, shape {}, units {}: {}", c.name, c.shape, c.units, c.meaning);
    }
    let mut criteria = String::new();
    for (i, c) in template.criteria.iter().enumerate() {
        let _ = writeln!(criteria, "{}. {}", i + 1, c);
    }
    let system = template
        .text
        .replace("{{steps}}", &steps.to_string())
        .replace("{{channel_docs}}", docs.trim_end())
        .replace("{{criteria}}", criteria.trim_end())
        .replace("{{pair_count}}", &pairs.len().to_string())
        .replace("{{example}}", &example_list(pairs.len()));

    let mut user = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        let _ = writeln!(user, "Pair {}", i + 1);
        for (j, seg) in [&pair.segment_a, &pair.segment_b].into_iter().enumerate() {
            let _ = writeln!(user, "Trajectory {j}:");
            for name in template.channel_names() {
                let rows = seg.channel(name).expect("checked above");
                let body: Vec<String> = rows
                    .iter()
                    .map(|r| {
                        let vals: Vec<String> = r.iter().map(|&v| fmt_value(v, template.precision)).collect();
                        format!("[{}]", vals.join(", "))
                    })
                    .collect();
                let _ = writeln!(user, "  {name}: {}", body.join(" "));
            }
        }
        user.push('\n');
    }
    Ok(Prompt {
        system,
        user: user.trim_end().to_string(),
    })
}
