use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PreferenceError, TrajectorySegment};
use crate::numerics::{
    sinusoidal_encoding, Activation, DenseArray, Linear, Mlp, Module, Parameter, Tape, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Step reward depends on the current step only.
    Markovian,
    /// Step reward depends on a causal window of preceding steps.
    NonMarkovian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorArch {
    Transformer,
    /// Per-step MLP; Markovian only.
    Mlp,
}

fn default_width() -> usize {
    128
}
fn default_heads() -> usize {
    8
}
fn default_blocks() -> usize {
    6
}
fn default_noise() -> f64 {
    0.15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    #[serde(default = "PredictorConfig::default_mode")]
    pub mode: RewardMode,
    /// Window length; 0 picks the mode default (1 Markovian, 8 non-Markovian).
    #[serde(default)]
    pub context_length: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "PredictorConfig::default_arch")]
    pub architecture: PredictorArch,
    /// Feature width of one step; 0 means "infer from the data".
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default)]
    pub include_actions: bool,
    /// Annotator error rate ε used by the adjusted loss.
    #[serde(default = "default_noise")]
    pub noise_rate: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::Markovian,
            context_length: 0,
            width: default_width(),
            heads: default_heads(),
            blocks: default_blocks(),
            architecture: PredictorArch::Transformer,
            input_dim: 0,
            include_actions: false,
            noise_rate: default_noise(),
        }
    }
}

impl PredictorConfig {
    fn default_mode() -> RewardMode {
        RewardMode::Markovian
    }

    fn default_arch() -> PredictorArch {
        PredictorArch::Transformer
    }

    pub fn context(&self) -> usize {
        match (self.context_length, self.mode) {
            (0, RewardMode::Markovian) => 1,
            (0, RewardMode::NonMarkovian) => 8,
            (n, _) => n,
        }
    }

    pub fn causal(&self) -> bool {
        self.mode == RewardMode::NonMarkovian
    }

    pub fn validate(&self) -> Result<(), PreferenceError> {
        let bad = |m: String| Err(PreferenceError::Config(m));
        if self.mode == RewardMode::Markovian && self.context() != 1 {
            return bad(format!(
                "markovian predictors use context_length 1, got {}",
                self.context()
            ));
        }
        if self.architecture == PredictorArch::Mlp && self.mode != RewardMode::Markovian {
            return bad("the mlp predictor is markovian only".into());
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(PreferenceError::InvalidNoiseRate(self.noise_rate));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.blocks == 0 && self.architecture == PredictorArch::Transformer {
            return bad("transformer needs at least one block".into());
        }
        Ok(())
    }
}

/// Per-feature standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics over every step of every segment. Near-constant features
    /// keep unit scale.
    pub fn from_segments<'a>(
        segments: impl IntoIterator<Item = &'a TrajectorySegment>,
        include_actions: bool,
    ) -> Self {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for seg in segments {
            for row in seg.features(include_actions) {
                if sum.is_empty() {
                    sum = vec![0.0; row.len()];
                    sq = vec![0.0; row.len()];
                }
                for (i, v) in row.iter().enumerate() {
                    sum[i] += v;
                    sq[i] += v * v;
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var.sqrt() < 1e-6 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn normalize_into(&self, row: &[f64], out: &mut Vec<f64>) {
        out.extend(
            row.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (v - m) / s),
        );
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_gain: Parameter,
    ln1_bias: Parameter,
    query: Linear,
    key: Linear,
    value: Linear,
    proj: Linear,
    ln2_gain: Parameter,
    ln2_bias: Parameter,
    fc: Linear,
    out: Linear,
}

fn gain(name: String, width: usize) -> Parameter {
    Parameter::new(name, DenseArray::full(&[width], 1.0)).expect("finite")
}

fn bias(name: String, width: usize) -> Parameter {
    Parameter::new(name, DenseArray::zeros(&[width])).expect("finite")
}

fn affine_norm(tape: &mut Tape, x: Var, g: &Parameter, b: &Parameter) -> Result<Var, PreferenceError> {
    let n = tape.layer_norm(x);
    let gv = tape.param(g);
    let bv = tape.param(b);
    let y = tape.mul_row(n, gv)?;
    Ok(tape.add_row(y, bv)?)
}

impl Block {
    fn new<R: Rng + ?Sized>(name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            ln1_gain: gain(format!("{name}.ln1.gain"), width),
            ln1_bias: bias(format!("{name}.ln1.bias"), width),
            query: Linear::new(&format!("{name}.attn.query"), width, width, rng),
            key: Linear::new(&format!("{name}.attn.key"), width, width, rng),
            value: Linear::new(&format!("{name}.attn.value"), width, width, rng),
            proj: Linear::new(&format!("{name}.attn.proj"), width, width, rng),
            ln2_gain: gain(format!("{name}.ln2.gain"), width),
            ln2_bias: bias(format!("{name}.ln2.bias"), width),
            fc: Linear::new(&format!("{name}.mlp.fc"), width, 4 * width, rng),
            out: Linear::new(&format!("{name}.mlp.out"), 4 * width, width, rng),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        seq_len: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var, PreferenceError> {
        let h = affine_norm(tape, x, &self.ln1_gain, &self.ln1_bias)?;
        let q = self.query.forward(tape, h)?;
        let k = self.key.forward(tape, h)?;
        let v = self.value.forward(tape, h)?;
        let a = tape.attention(q, k, v, seq_len, heads, causal)?;
        let a = self.proj.forward(tape, a)?;
        let x = tape.add(x, a)?;
        let h = affine_norm(tape, x, &self.ln2_gain, &self.ln2_bias)?;
        let h = self.fc.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.out.forward(tape, h)?;
        Ok(tape.add(x, h)?)
    }
}

impl Module for Block {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.ln1_gain);
        f(&self.ln1_bias);
        self.query.visit_params(f);
        self.key.visit_params(f);
        self.value.visit_params(f);
        self.proj.visit_params(f);
        f(&self.ln2_gain);
        f(&self.ln2_bias);
        self.fc.visit_params(f);
        self.out.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.ln1_gain);
        f(&mut self.ln1_bias);
        self.query.visit_params_mut(f);
        self.key.visit_params_mut(f);
        self.value.visit_params_mut(f);
        self.proj.visit_params_mut(f);
        f(&mut self.ln2_gain);
        f(&mut self.ln2_bias);
        self.fc.visit_params_mut(f);
        self.out.visit_params_mut(f);
    }
}

/// GPT-style causal transformer emitting one scalar per window. The head reads
/// the residual stream directly, so feature scale reaches the output.
#[derive(Clone, Debug)]
struct TransformerNet {
    embed: Linear,
    blocks: Vec<Block>,
    head: Linear,
}

impl TransformerNet {
    fn new<R: Rng + ?Sized>(cfg: &PredictorConfig, input_dim: usize, rng: &mut R) -> Self {
        let w = cfg.width;
        Self {
            embed: Linear::new("embed", input_dim, w, rng),
            blocks: (0..cfg.blocks)
                .map(|i| Block::new(&format!("block{i}"), w, rng))
                .collect(),
            head: Linear::zeros("head", w, 1),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        tokens: Var,
        windows: usize,
        cfg: &PredictorConfig,
    ) -> Result<Var, PreferenceError> {
        let seq_len = cfg.context();
        let x = self.embed.forward(tape, tokens)?;
        let table = sinusoidal_encoding(seq_len, cfg.width);
        let mut tiled = Vec::with_capacity(windows * table.len());
        for _ in 0..windows {
            tiled.extend_from_slice(table.data());
        }
        let pe = tape.constant(DenseArray::new(vec![windows * seq_len, cfg.width], tiled)?);
        let mut x = tape.add(x, pe)?;
        for block in &self.blocks {
            x = block.forward(tape, x, seq_len, cfg.heads, cfg.causal())?;
        }
        // Only the last position of each window is decoded.
        let last: Vec<usize> = (0..windows).map(|w| w * seq_len + seq_len - 1).collect();
        let x = tape.gather_rows(x, last)?;
        Ok(self.head.forward(tape, x)?)
    }
}

impl Module for TransformerNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.embed.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.embed.visit_params_mut(f);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}

#[derive(Clone, Debug)]
enum Net {
    Transformer(TransformerNet),
    Mlp(Mlp),
}

/// Scores trajectory steps with a learned scalar reward.
#[derive(Clone, Debug)]
pub struct RewardPredictor {
    config: PredictorConfig,
    stats: FeatureStats,
    net: Net,
}

impl RewardPredictor {
    /// Fresh predictor with a zero output layer; `config.input_dim` must be set.
    pub fn new<R: Rng + ?Sized>(
        config: PredictorConfig,
        stats: FeatureStats,
        rng: &mut R,
    ) -> Result<Self, PreferenceError> {
        config.validate()?;
        if config.input_dim == 0 {
            return Err(PreferenceError::Config("predictor input_dim is unset".into()));
        }
        if stats.dim() != config.input_dim {
            return Err(PreferenceError::FeatureDim {
                expected: config.input_dim,
                found: stats.dim(),
            });
        }
        let net = match config.architecture {
            PredictorArch::Transformer => {
                Net::Transformer(TransformerNet::new(&config, config.input_dim, rng))
            }
            PredictorArch::Mlp => {
                let w = config.width;
                Net::Mlp(Mlp::new(
                    "mlp",
                    &[config.input_dim, w, w, 1],
                    Activation::Gelu,
                    0.0,
                    rng,
                ))
            }
        };
        Ok(Self { config, stats, net })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: FeatureStats) -> Result<(), PreferenceError> {
        if stats.dim() != self.config.input_dim {
            return Err(PreferenceError::FeatureDim {
                expected: self.config.input_dim,
                found: stats.dim(),
            });
        }
        self.stats = stats;
        Ok(())
    }

    fn check_dim(&self, found: usize) -> Result<(), PreferenceError> {
        if found != self.config.input_dim {
            return Err(PreferenceError::FeatureDim {
                expected: self.config.input_dim,
                found,
            });
        }
        Ok(())
    }

    /// Appends the normalized window ending at `end` (inclusive), left-padded
    /// with zero rows when fewer than `context` steps precede it.
    fn push_window(&self, features: &[Vec<f64>], end: usize, out: &mut Vec<f64>) {
        let ctx = self.config.context();
        let first = (end + 1).saturating_sub(ctx);
        let pad = ctx - (end + 1 - first);
        out.extend(std::iter::repeat_n(0.0, pad * self.config.input_dim));
        for row in &features[first..=end] {
            self.stats.normalize_into(row, out);
        }
    }

    /// Packed tokens for every step of every segment: `[segments * H * context, dim]`.
    fn segment_tokens(&self, segments: &[&TrajectorySegment]) -> Result<(DenseArray, usize), PreferenceError> {
        let mut data = Vec::new();
        let mut windows = 0;
        for seg in segments {
            let features = seg.features(self.config.include_actions);
            self.check_dim(features.first().map_or(0, Vec::len))?;
            for t in 0..features.len() {
                self.push_window(&features, t, &mut data);
                windows += 1;
            }
        }
        let rows = windows * self.config.context();
        Ok((DenseArray::new(vec![rows, self.config.input_dim], data)?, windows))
    }

    /// One reward per window; `tokens` holds `windows * context` rows.
    pub fn forward_tokens(&self, tape: &mut Tape, tokens: DenseArray, windows: usize) -> Result<Var, PreferenceError> {
        let x = tape.constant(tokens);
        match &self.net {
            Net::Transformer(net) => net.forward(tape, x, windows, &self.config),
            Net::Mlp(mlp) => Ok(mlp.forward(tape, x)?),
        }
    }

    /// Segment returns (sums of step rewards) on the tape, shape `[segments, 1]`.
    pub fn segment_returns(
        &self,
        tape: &mut Tape,
        segments: &[&TrajectorySegment],
    ) -> Result<Var, PreferenceError> {
        let len = segments.first().map_or(0, |s| s.len());
        if segments.iter().any(|s| s.len() != len) {
            return Err(PreferenceError::Config("segments in a batch differ in length".into()));
        }
        let (tokens, windows) = self.segment_tokens(segments)?;
        let rewards = self.forward_tokens(tape, tokens, windows)?;
        let per_seg = tape.reshape(rewards, vec![segments.len(), len])?;
        let sums = tape.sum_last(per_seg);
        Ok(tape.reshape(sums, vec![segments.len(), 1])?)
    }

    /// Per-step rewards for one segment.
    pub fn predict_step_rewards(&self, segment: &TrajectorySegment) -> Result<Vec<f64>, PreferenceError> {
        let mut tape = Tape::new();
        let (tokens, windows) = self.segment_tokens(&[segment])?;
        let out = self.forward_tokens(&mut tape, tokens, windows)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Rewards for live trailing windows: each window lists raw feature rows
    /// ending at the step being scored (at most `context` rows are used).
    pub fn predict_windows(&self, windows: &[&[Vec<f64>]]) -> Result<Vec<f64>, PreferenceError> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(windows.len() * self.config.context() * self.config.input_dim);
        for w in windows {
            let Some(last) = w.last() else {
                return Err(PreferenceError::Config("empty reward window".into()));
            };
            self.check_dim(last.len())?;
            self.push_window(w, w.len() - 1, &mut data);
        }
        let rows = windows.len() * self.config.context();
        let tokens = DenseArray::new(vec![rows, self.config.input_dim], data)?;
        let mut tape = Tape::new();
        let out = self.forward_tokens(&mut tape, tokens, windows.len())?;
        Ok(tape.value(out).data().to_vec())
    }
}

impl Module for RewardPredictor {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        match &self.net {
            Net::Transformer(n) => n.visit_params(f),
            Net::Mlp(n) => n.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match &mut self.net {
            Net::Transformer(n) => n.visit_params_mut(f),
            Net::Mlp(n) => n.visit_params_mut(f),
        }
    }
}
