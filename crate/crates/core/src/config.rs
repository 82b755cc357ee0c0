//! Schedules, model-scaling rules and run configuration.
//!
//! The configuration file is a JSON object with exactly the sections
//! `model`, `schedule`, `run` and `data`. Missing fields take the desk-scale
//! defaults; unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale sides used for observed frames (dense) and future frames (sparse).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSchedule {
    pub obs_scales: Vec<usize>,
    pub fut_scales: Vec<usize>,
    /// Side of the finest latent grid produced by the encoder.
    pub latent_base: usize,
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        let latent_base = 16;
        Self {
            obs_scales: [1, 2, 3, 4, 5, 6, 8, 10, 13, 16].into_iter().filter(|&s| s <= latent_base).collect(),
            fut_scales: vec![1, 2, 3, 4, 5, 6],
            latent_base,
        }
    }
}

impl ScaleSchedule {
    pub fn new(obs_scales: Vec<usize>, fut_scales: Vec<usize>, latent_base: usize) -> Result<Self> {
        let s = Self { obs_scales, fut_scales, latent_base };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_base == 0 {
            return Err(Error::config("schedule.latent_base", "must be positive"));
        }
        for (key, scales) in [("schedule.obs_scales", &self.obs_scales), ("schedule.fut_scales", &self.fut_scales)] {
            if scales.is_empty() {
                return Err(Error::config(key, "must not be empty"));
            }
            if scales[0] == 0 {
                return Err(Error::config(key, "entries must be positive"));
            }
            if scales.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(key, "must be strictly increasing"));
            }
            if scales.iter().any(|&s| s > self.latent_base) {
                return Err(Error::config(key, format!("entries must not exceed latent_base {}", self.latent_base)));
            }
        }
        if self.fut_scales.len() >= self.obs_scales.len() {
            return Err(Error::config("schedule.fut_scales", "must be strictly shorter than obs_scales"));
        }
        if self.obs_scales[..self.fut_scales.len()] != self.fut_scales[..] {
            return Err(Error::config("schedule.fut_scales", "must be a prefix of obs_scales"));
        }
        Ok(())
    }

    pub fn scales(&self, role: crate::Role) -> &[usize] {
        match role {
            crate::Role::Observed => &self.obs_scales,
            crate::Role::Future => &self.fut_scales,
        }
    }

    /// Tokens per frame for a role, excluding the start token.
    pub fn tokens_per_frame(&self, role: crate::Role) -> usize {
        self.scales(role).iter().map(|s| s * s).sum()
    }
}

/// Per-scale loss weights `L_l^2 / sum_k L_k^2 * K`; they sum to `K`.
pub fn scale_weights(scales: &[usize]) -> Result<Vec<f64>> {
    if scales.is_empty() {
        return Err(Error::config("scales", "must not be empty"));
    }
    if scales.contains(&0) {
        return Err(Error::config("scales", "entries must be positive"));
    }
    let k = scales.len() as f64;
    let total: f64 = scales.iter().map(|&s| (s * s) as f64).sum();
    Ok(scales.iter().map(|&s| (s * s) as f64 / total * k).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Encoder/decoder channel widths at full and half resolution.
    pub channels: [usize; 2],
    pub groups: usize,
    /// Commitment weight.
    pub beta: f64,
    pub cross_attn_heads: usize,
    /// Steps without use after which a codeword is re-initialized.
    pub dead_code_steps: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { channels: [32, 64], groups: 8, beta: 0.25, cross_attn_heads: 4, dead_code_steps: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ffn_dim: usize,
    pub action_dim: usize,
    pub codebook_size: usize,
    pub embed_dim: usize,
    pub tokenizer: TokenizerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mut m = scaled_model_config(4).expect("depth 4 is valid");
        m.ffn_dim = 4 * m.width;
        m.codebook_size = 512;
        m.embed_dim = 32;
        m
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelConfig {
    depth: Option<usize>,
    width: Option<usize>,
    heads: Option<usize>,
    dropout: Option<f64>,
    ffn_dim: Option<usize>,
    action_dim: Option<usize>,
    codebook_size: Option<usize>,
    embed_dim: Option<usize>,
    tokenizer: Option<TokenizerConfig>,
}

impl<'de> Deserialize<'de> for ModelConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawModelConfig::deserialize(d)?;
        let defaults = ModelConfig::default();
        // width, heads, dropout and ffn_dim follow the depth scaling rule unless given
        let scaled = match raw.depth {
            Some(depth) => scaled_model_config(depth).map_err(serde::de::Error::custom)?,
            None => defaults.clone(),
        };
        Ok(ModelConfig {
            depth: scaled.depth,
            width: raw.width.unwrap_or(scaled.width),
            heads: raw.heads.unwrap_or(scaled.heads),
            dropout: raw.dropout.unwrap_or(scaled.dropout),
            ffn_dim: raw.ffn_dim.unwrap_or(scaled.ffn_dim),
            action_dim: raw.action_dim.unwrap_or(defaults.action_dim),
            codebook_size: raw.codebook_size.unwrap_or(defaults.codebook_size),
            embed_dim: raw.embed_dim.unwrap_or(defaults.embed_dim),
            tokenizer: raw.tokenizer.unwrap_or_default(),
        })
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 8] = [
            ("model.depth", self.depth >= 1, "must be at least 1"),
            ("model.width", self.width >= 1, "must be positive"),
            ("model.heads", self.heads >= 1 && self.width % self.heads.max(1) == 0, "must divide width"),
            ("model.dropout", (0.0..1.0).contains(&self.dropout), "must lie in [0, 1)"),
            ("model.ffn_dim", self.ffn_dim >= 1, "must be positive"),
            ("model.codebook_size", self.codebook_size >= 1, "must be positive"),
            ("model.embed_dim", self.embed_dim >= 1, "must be positive"),
            ("model.action_dim", self.action_dim >= 1, "must be positive"),
        ];
        for (key, ok, msg) in checks {
            if !ok {
                return Err(Error::config(key, msg));
            }
        }
        let t = &self.tokenizer;
        if t.groups == 0 || t.channels.iter().any(|&c| c == 0 || c % t.groups != 0) {
            return Err(Error::config("model.tokenizer.groups", "must divide every channel width"));
        }
        if t.cross_attn_heads == 0 || self.embed_dim % t.cross_attn_heads != 0 {
            return Err(Error::config("model.tokenizer.cross_attn_heads", "must divide embed_dim"));
        }
        if !(t.beta >= 0.0 && t.beta.is_finite()) {
            return Err(Error::config("model.tokenizer.beta", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Model shape from depth alone: `w = 64d`, `h = d`, `dr = 0.1 d / 24`.
///
/// The feed-forward width is `min(w, 1024)` up to depth 20, which gives the
/// sizes 768/1024/1024 at depths 12/16/20, and `4w` beyond.
pub fn scaled_model_config(depth: usize) -> Result<ModelConfig> {
    if depth == 0 {
        return Err(Error::config("model.depth", "must be at least 1"));
    }
    let width = 64 * depth;
    let ffn_dim = if depth <= 20 { width.min(1024) } else { 4 * width };
    Ok(ModelConfig {
        depth,
        width,
        heads: depth,
        dropout: depth as f64 / 240.0,
        ffn_dim,
        action_dim: 2,
        codebook_size: 8192,
        embed_dim: 64,
        tokenizer: TokenizerConfig::default(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Observed (context) frames per sequence.
    pub context_frames: usize,
    /// Total frames per training sequence, context included.
    pub sequence_length: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    pub weight_decay_tokenizer: f64,
    pub weight_decay_transformer: f64,
    pub batch_size: usize,
    pub tokenizer_lr: f64,
    pub tokenizer_steps: usize,
    pub tokenizer_batch: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub prompt_dropout: f64,
    pub use_motion_prompt: bool,
    /// Minimum mean tracking confidence for a trajectory to be kept.
    pub confidence_threshold: f64,
    pub reward_weight: f64,
    pub train_reward: bool,
    pub checkpoint_every: usize,
    pub mixed_precision: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            context_frames: 2,
            sequence_length: 6,
            peak_lr: 1e-4,
            warmup_steps: 5000,
            total_steps: 100_000,
            min_lr_ratio: 0.0,
            grad_clip: 1.0,
            weight_decay_tokenizer: 0.0,
            weight_decay_transformer: 0.01,
            batch_size: 4,
            tokenizer_lr: 1e-3,
            tokenizer_steps: 2000,
            tokenizer_batch: 8,
            top_k: 100,
            top_p: 1.0,
            temperature: 1.0,
            prompt_dropout: 0.5,
            use_motion_prompt: true,
            confidence_threshold: 0.5,
            reward_weight: 0.1,
            train_reward: true,
            checkpoint_every: 1000,
            mixed_precision: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 10] = [
            ("run.context_frames", self.context_frames >= 1, "must be at least 1"),
            ("run.sequence_length", self.sequence_length > self.context_frames, "must exceed context_frames"),
            ("run.top_k", self.top_k >= 1, "must be at least 1"),
            ("run.top_p", (0.0..=1.0).contains(&self.top_p), "must lie in [0, 1]"),
            ("run.prompt_dropout", (0.0..=1.0).contains(&self.prompt_dropout), "must lie in [0, 1]"),
            ("run.temperature", self.temperature > 0.0, "must be positive"),
            ("run.grad_clip", self.grad_clip > 0.0, "must be positive"),
            ("run.batch_size", self.batch_size >= 1, "must be at least 1"),
            ("run.confidence_threshold", (0.0..=1.0).contains(&self.confidence_threshold), "must lie in [0, 1]"),
            ("run.mixed_precision", !self.mixed_precision, "reduced precision is not supported on this backend"),
        ];
        for (key, ok, msg) in checks {
            if !ok {
                return Err(Error::config(key, msg));
            }
        }
        Ok(())
    }

    pub fn future_frames(&self) -> usize {
        self.sequence_length - self.context_frames
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Frame side in pixels; must equal `4 * latent_base`.
    pub frame_size: usize,
    pub num_objects: usize,
    pub episodes: usize,
    pub episode_len: usize,
    pub step_size: usize,
    pub grid_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { frame_size: 64, num_objects: 2, episodes: 64, episode_len: 30, step_size: 1, grid_size: 12 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub schedule: ScaleSchedule,
    pub run: RunConfig,
    pub data: DataConfig,
}

/// Spatial stride between frames and the finest latent grid.
pub const ENCODER_STRIDE: usize = 4;

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.model.validate()?;
        self.run.validate()?;
        if self.data.frame_size != ENCODER_STRIDE * self.schedule.latent_base {
            return Err(Error::config(
                "data.frame_size",
                format!("must equal {ENCODER_STRIDE} * latent_base = {}", ENCODER_STRIDE * self.schedule.latent_base),
            ));
        }
        if self.data.grid_size == 0 || self.data.grid_size > self.data.frame_size {
            return Err(Error::config("data.grid_size", "must lie in 1..=frame_size"));
        }
        if self.data.step_size == 0 {
            return Err(Error::config("data.step_size", "must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::config(json_path_hint(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn json_path_hint(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    // serde reports unknown keys as "unknown field `name`"
    match msg.split('`').nth(1) {
        Some(name) if msg.starts_with("unknown field") => name.to_string(),
        _ => "<document>".to_string(),
    }
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Config::from_json(&text)
}

pub fn write_config(cfg: &Config, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_json()).map_err(|e| Error::io(path, e))
}
