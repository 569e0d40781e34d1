//! The experiment configuration file.
//!
//! One TOML document with sections `encoder`, `prompt`, `decoder`, `loss`,
//! `train`, `metrics` and `service`. Every key is required and unknown keys
//! are rejected, so a typo or an omission fails loudly instead of silently
//! falling back to a default. [`ExperimentConfig::default`] is the desk-scale
//! recipe and [`ExperimentConfig::template`] renders it as a complete file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Output channels of the neck; also the prompt token width.
    pub neck_dim: usize,
    pub num_tap_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            patch_size: 8,
            embed_dim: 128,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            neck_dim: 32,
            num_tap_layers: 4,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "encoder.image_size {} is not divisible by encoder.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "encoder.embed_dim {} is not divisible by encoder.heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.num_tap_layers == 0 || self.depth < self.num_tap_layers {
            return bad(format!(
                "encoder.depth {} must be >= encoder.num_tap_layers {} >= 1",
                self.depth, self.num_tap_layers
            ));
        }
        if self.in_channels == 0 || self.neck_dim == 0 || self.mlp_ratio == 0 {
            return bad("encoder channel counts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// Frequency scale of the random Fourier positional basis.
    pub fourier_scale: f64,
    pub enable_mask_prompt: bool,
    /// Shared width of the context image and text embeddings.
    pub clip_dim: usize,
    pub context_image_size: usize,
    pub context_patch: usize,
    pub context_depth: usize,
    pub text_depth: usize,
    pub text_max_len: usize,
    pub clip_heads: usize,
    pub fusion_heads: usize,
    pub freeze_context_encoders: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            fourier_scale: 1.0,
            enable_mask_prompt: false,
            clip_dim: 64,
            context_image_size: 224,
            context_patch: 32,
            context_depth: 2,
            text_depth: 2,
            text_max_len: 16,
            clip_heads: 4,
            fusion_heads: 4,
            freeze_context_encoders: false,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.fourier_scale > 0.0) {
            return bad("prompt.fourier_scale must be positive".into());
        }
        if self.context_patch == 0 || self.context_image_size % self.context_patch != 0 {
            return bad(format!(
                "prompt.context_image_size {} is not divisible by prompt.context_patch {}",
                self.context_image_size, self.context_patch
            ));
        }
        for (name, heads) in [("clip_heads", self.clip_heads), ("fusion_heads", self.fusion_heads)] {
            if heads == 0 || self.clip_dim % heads != 0 {
                return bad(format!(
                    "prompt.clip_dim {} is not divisible by prompt.{name} {heads}",
                    self.clip_dim
                ));
            }
        }
        if self.text_max_len < 3 {
            return bad("prompt.text_max_len must leave room for BOS, one word and EOS".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub attention_downsample: usize,
    /// Upscaling applied to the image grid before the mask readout.
    pub upscale_factor: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            mlp_dim: 128,
            attention_downsample: 1,
            upscale_factor: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("decoder.depth must be >= 1".into());
        }
        let internal = dim / self.attention_downsample.max(1);
        if self.heads == 0 || internal == 0 || internal % self.heads != 0 {
            return bad(format!(
                "decoder attention width {internal} is not divisible by decoder.heads {}",
                self.heads
            ));
        }
        if self.upscale_factor < 2 || !self.upscale_factor.is_power_of_two() {
            return bad("decoder.upscale_factor must be a power of two >= 2".into());
        }
        if dim % (2 * self.upscale_factor) != 0 {
            return bad(format!(
                "encoder.neck_dim {dim} must be divisible by 2 * decoder.upscale_factor"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Dice weight.
    pub lambda1: f64,
    /// BCE weight.
    pub lambda2: f64,
    /// Soft-Dice smoothing.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 > 0.0) {
            return Err(Error::Config(
                "loss weights must be non-negative with a positive sum".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("loss.epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoMultiscale,
    NoText,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoMultiscale, Ablation::NoText];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMultiscale => "no_multiscale",
            Ablation::NoText => "no_text",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_multiscale" => Ok(Ablation::NoMultiscale),
            "no_text" => Ok(Ablation::NoText),
            other => Err(Error::validation("ablation", format!("unknown variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Relative sampling weights of the per-batch prompt modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSchedule {
    #[serde(rename = "box")]
    pub boxes: f64,
    pub text: f64,
    pub box_text: f64,
    pub silent_text: f64,
}

impl Default for PromptSchedule {
    fn default() -> Self {
        Self {
            boxes: 1.0,
            text: 1.0,
            box_text: 1.0,
            silent_text: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data_root: PathBuf,
    pub runs_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Data order and prompt sampling seed.
    pub seed: u64,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    /// Write an intermediate checkpoint every N steps; 0 disables.
    pub checkpoint_every: usize,
    pub ablation: Ablation,
    pub precision: Precision,
    /// Maximum box-corner jitter in pixels applied to training box prompts.
    pub box_jitter: f64,
    /// Parameter-name prefixes excluded from optimization.
    pub freeze: Vec<String>,
    pub prompt_mode_schedule: PromptSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data/synth"),
            runs_dir: PathBuf::from("runs"),
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-4,
            seed: 0,
            max_steps: 0,
            checkpoint_every: 0,
            ablation: Ablation::Full,
            precision: Precision::F32,
            box_jitter: 2.0,
            freeze: Vec::new(),
            prompt_mode_schedule: PromptSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        let s = &self.prompt_mode_schedule;
        let weights = [s.boxes, s.text, s.box_text, s.silent_text];
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "train.prompt_mode_schedule weights must be non-negative with a positive sum".into(),
            ));
        }
        if !(self.box_jitter >= 0.0) {
            return Err(Error::Config("train.box_jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub nsd_tolerance: f64,
    pub exclusion_threshold: f64,
    /// Logit threshold used to binarize predictions.
    pub logit_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            nsd_tolerance: omtsam_metrics::DEFAULT_NSD_TOLERANCE,
            exclusion_threshold: omtsam_metrics::DEFAULT_EXCLUSION_THRESHOLD,
            logit_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub cors_origins: Vec<String>,
    pub allow_reload: bool,
    /// Dataset id -> dataset root (directory holding `manifest.json`).
    pub datasets: BTreeMap<String, PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            cors_origins: vec!["http://localhost:5173".into()],
            allow_reload: false,
            datasets: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Weight-initialization seed (also seeds the frozen positional basis).
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub service: ServiceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seed: 0,
            encoder: EncoderConfig::default(),
            prompt: PromptConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate()?;
        self.decoder.validate(self.encoder.neck_dim)?;
        self.loss.validate()?;
        self.train.validate()?;
        if !(self.metrics.nsd_tolerance > 0.0) {
            return Err(Error::Config("metrics.nsd_tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// A 32×32 model small enough for smoke tests and demos.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.name = "smoke".into();
        cfg.encoder = EncoderConfig {
            image_size: 32,
            in_channels: 1,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            neck_dim: 16,
            num_tap_layers: 2,
        };
        cfg.prompt.clip_dim = 32;
        cfg.prompt.context_image_size = 64;
        cfg.prompt.context_depth = 1;
        cfg.prompt.text_depth = 1;
        cfg.prompt.clip_heads = 2;
        cfg.prompt.fusion_heads = 2;
        cfg.decoder = DecoderConfig {
            depth: 1,
            heads: 2,
            mlp_dim: 32,
            attention_downsample: 1,
            upscale_factor: 4,
        };
        cfg.train.epochs = 1;
        cfg.train.batch_size = 4;
        cfg
    }

    /// A complete config file with the default values.
    pub fn template() -> String {
        Self::default().to_toml()
    }

    /// Stable hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
