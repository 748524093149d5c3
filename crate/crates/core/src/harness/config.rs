//! Run configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ast_attention::AstConfig;
use crate::encoders::{audio_kernel_dims, AudioEncoderConfig, PositionalKind, VisualEncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::media_ingest::SamplingConfig;
use crate::objective::{LossOptions, NegativePooling};
use crate::synthetic::{ScenarioCounts, SceneGeometry, SplitFractions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per clip (`T`).
    pub frames: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub downsample_factor: usize,
    pub feature_dim: usize,
    pub temporal_dim: usize,
    pub visual_base_channels: usize,
    pub visual_max_channels: usize,
    pub audio_channels: usize,
    /// Spectrogram height `H_a`.
    pub freq_bins: usize,
    /// Spectrogram width `W_a`.
    pub time_steps: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer; 0 means `4 · D`.
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub positional: PositionalKind,
    pub temperature: f64,
    pub negative_pooling: NegativePooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 16,
            frame_height: 64,
            frame_width: 64,
            downsample_factor: 16,
            feature_dim: 64,
            temporal_dim: 32,
            visual_base_channels: 16,
            visual_max_channels: 64,
            audio_channels: 64,
            freq_bins: 128,
            time_steps: 256,
            depth: 3,
            heads: 4,
            ffn_hidden: 0,
            dropout: 0.1,
            positional: PositionalKind::Sinusoidal,
            temperature: 1.0,
            negative_pooling: NegativePooling::Mean,
        }
    }
}

impl ModelConfig {
    /// Token width `D = D_f + D_t`.
    pub fn dim(&self) -> usize {
        self.feature_dim + self.temporal_dim
    }

    pub fn visual(&self) -> VisualEncoderConfig {
        VisualEncoderConfig {
            frame_height: self.frame_height,
            frame_width: self.frame_width,
            downsample_factor: self.downsample_factor,
            feature_dim: self.feature_dim,
            base_channels: self.visual_base_channels,
            max_channels: self.visual_max_channels,
        }
    }

    pub fn audio(&self) -> AudioEncoderConfig {
        AudioEncoderConfig {
            freq_bins: self.freq_bins,
            time_steps: self.time_steps,
            frames: self.frames,
            channels: self.audio_channels,
            feature_dim: self.feature_dim,
        }
    }

    pub fn ast(&self) -> AstConfig {
        let mut cfg = AstConfig::for_dim(self.dim());
        cfg.depth = self.depth;
        cfg.heads = self.heads;
        if self.ffn_hidden > 0 {
            cfg.ffn_hidden = self.ffn_hidden;
        }
        cfg.dropout = self.dropout;
        cfg
    }

    pub fn loss(&self) -> LossOptions {
        LossOptions {
            temperature: self.temperature,
            negative_pooling: self.negative_pooling,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.visual().grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("encoders", "frames", "T must be at least 1"));
        }
        if self.temporal_dim == 0 {
            return Err(Error::config("encoders", "temporal_dim", "must be positive"));
        }
        self.visual().validate()?;
        if self.freq_bins == 0 {
            return Err(Error::config("encoders", "freq_bins", "must be positive"));
        }
        if self.audio_channels == 0 {
            return Err(Error::config("encoders", "audio_channels", "must be positive"));
        }
        audio_kernel_dims(self.time_steps, self.freq_bins, self.frames)
            .map_err(|e| Error::config("encoders", "time_steps", e.to_string()))?;
        self.ast().validate(self.dim())?;
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("objective", "temperature", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup then cosine decay to zero over the run.
    #[default]
    WarmupCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the number of optimizer steps when non-zero.
    pub max_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Write a checkpoint every this many steps; 0 only at the end.
    pub checkpoint_every: usize,
    /// Run validation every this many steps; 0 disables it.
    pub validate_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 5e-4,
            schedule: Schedule::WarmupCosine,
            warmup_steps: 50,
            batch_size: 8,
            epochs: 20,
            max_steps: 0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            checkpoint_every: 0,
            validate_every: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        const M: &str = "harness";
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(M, "learning_rate", "must be positive and finite"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(M, "batch_size", "need at least 2 clips per batch for negatives"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config(M, "beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(M, "beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(M, "epsilon", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(M, "weight_decay", "must be non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config(M, "grad_clip", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub counts: ScenarioCounts,
    pub splits: SplitFractions,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            counts: ScenarioCounts::uniform(50),
            splits: SplitFractions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub fps: f64,
    pub sample_rate: u32,
    /// Relative paths resolve against the config file's directory.
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub sampling: SamplingConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            fps: 8.0,
            sample_rate: 16_000,
            train_manifest: None,
            val_manifest: None,
            test_manifest: None,
            synthetic: SyntheticConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(Error::config("harness", "fps", "must be positive and finite"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("harness", "sample_rate", "must be positive"));
        }
        let s = self.synthetic.splits;
        if !(s.val >= 0.0 && s.test >= 0.0 && s.val + s.test <= 1.0) {
            return Err(Error::config("synthetic_data", "splits", "fractions must be non-negative and sum to ≤ 1"));
        }
        self.sampling.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("harness", "config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates; manifest paths become absolute relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train_manifest, &mut cfg.data.val_manifest, &mut cfg.data.test_manifest]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.data.validate()?;
        self.eval.validate()?;
        let hop = self.spectrogram_hop_seconds();
        if (hop * self.data.sample_rate as f64).round() < 1.0 {
            return Err(Error::config(
                "media_ingest",
                "time_steps",
                "spectrogram hop is shorter than one sample",
            ));
        }
        Ok(())
    }

    pub fn clip_seconds(&self) -> f64 {
        self.model.frames as f64 / self.data.fps
    }

    pub fn spectrogram_hop_seconds(&self) -> f64 {
        self.clip_seconds() / self.model.time_steps as f64
    }

    pub fn scene_geometry(&self) -> SceneGeometry {
        SceneGeometry {
            frames: self.model.frames,
            height: self.model.frame_height,
            width: self.model.frame_width,
            fps: self.data.fps,
            sample_rate: self.data.sample_rate,
        }
    }
}
