use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::ContextStrategy;
use super::trajectory::TrajectoryKind;
use crate::diffusion::{LossKind, ModelConfig, ScheduleConfig, TrainConfig};
use crate::encoder::{EncoderConfig, Streams, MAX_CONTEXT};
use crate::error::{Error, Result};
use crate::nn::optim::AdamConfig;
use crate::nn::QueryTransformerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub frames: usize,
    pub video_len: usize,
    pub fov_deg: f64,
    pub kinds: Vec<TrajectoryKind>,
    pub train_scenes: usize,
    pub clips_per_scene: usize,
    pub max_stride: usize,
    pub eval_scenes: usize,
    pub eval_stride: usize,
    /// Scene seeds are `scene_seed_base + i` (training) and
    /// `scene_seed_base + 1_000_000 + i` (evaluation).
    pub scene_seed_base: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 4,
            latent_channels: 8,
            frames: 16,
            video_len: 64,
            fov_deg: 70.0,
            kinds: vec![TrajectoryKind::Pan, TrajectoryKind::Orbit, TrajectoryKind::Dolly],
            train_scenes: 32,
            clips_per_scene: 4,
            max_stride: 3,
            eval_scenes: 8,
            eval_stride: 2,
            scene_seed_base: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub heads: usize,
    pub semantic_layers: usize,
    pub semantic_heads: usize,
    pub semantic_queries: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub temporal_dim: usize,
    pub gate_kernel: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            semantic_layers: 4,
            semantic_heads: 4,
            semantic_queries: 8,
            blocks: 2,
            ffn_mult: 2,
            temporal_dim: 16,
            gate_kernel: 3,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub loss: LossKind,
    pub cond_dropout: f64,
    pub freeze_backbone: bool,
    /// Checkpoint to start from (its backbone is reused when freezing).
    pub init_checkpoint: Option<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 4,
            lr: 1e-4,
            clip_norm: Some(1.0),
            loss: LossKind::LogWeighted,
            cond_dropout: 0.1,
            freeze_backbone: false,
            init_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    /// Bound on the per-step denoised latent estimate; unbounded if absent.
    pub clip_x0: Option<f64>,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            ddim_steps: 25,
            cfg_scale: 3.5,
            clip_x0: Some(4.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextSection {
    /// `false` trains and evaluates the context-free baseline.
    pub enabled: bool,
    /// Strategy used at evaluation; training always samples after the clip.
    pub strategy: ContextStrategy,
    pub n: usize,
    pub epipolar_mask: bool,
    /// Mask distance threshold on the latent grid; half the grid diagonal
    /// when absent.
    pub mask_threshold: Option<f64>,
    pub temporal_embedding: bool,
    pub streams: Streams,
}

impl Default for ContextSection {
    fn default() -> Self {
        Self {
            enabled: true,
            strategy: ContextStrategy::RangeAfterEnd,
            n: 2,
            epipolar_mask: true,
            mask_threshold: None,
            temporal_embedding: true,
            streams: Streams::Both,
        }
    }
}

/// Full experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub context: ContextSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn latent_size(&self) -> usize {
        self.data.image_size / self.data.patch.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.patch == 0 || d.image_size % d.patch != 0 {
            return Err(Error::config("image_size must be a multiple of patch"));
        }
        if d.frames < 2 {
            return Err(Error::config("clips need at least two frames"));
        }
        if d.kinds.is_empty() {
            return Err(Error::config("at least one trajectory kind is required"));
        }
        if !(1..=super::dataset::MAX_STRIDE).contains(&d.max_stride) || !(1..=d.max_stride.max(d.eval_stride)).contains(&d.eval_stride) {
            return Err(Error::config("strides must lie in 1..=10"));
        }
        let need = (d.frames - 1) * d.max_stride.max(d.eval_stride) + 1 + MAX_CONTEXT;
        if d.video_len < need {
            return Err(Error::config(format!("video_len must be at least {need} for the configured strides")));
        }
        if !(1..=MAX_CONTEXT).contains(&self.context.n) {
            return Err(Error::config(format!("context n must be in 1..={MAX_CONTEXT}")));
        }
        if let Some(t) = self.context.mask_threshold {
            if !(t > 0.0) {
                return Err(Error::config("mask_threshold must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.train.cond_dropout) {
            return Err(Error::config("cond_dropout must be in [0, 1)"));
        }
        if self.sample.ddim_steps == 0 || self.sample.ddim_steps > self.model.diffusion_steps {
            return Err(Error::config("ddim_steps must be in 1..=diffusion_steps"));
        }
        self.model_config().encoder.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let s = self.latent_size();
        ModelConfig {
            encoder: EncoderConfig {
                frames: self.data.frames,
                height: s,
                width: s,
                latent_channels: self.data.latent_channels,
                dim: m.dim,
                heads: m.heads,
                semantic: QueryTransformerConfig {
                    layers: m.semantic_layers,
                    dim: m.dim,
                    heads: m.semantic_heads,
                    ffn_mult: m.ffn_mult,
                },
                semantic_queries: m.semantic_queries,
                vocab_size: super::dataset::vocabulary().len(),
                ffn_mult: m.ffn_mult,
                temporal_dim: m.temporal_dim,
                gate_kernel: m.gate_kernel,
                temporal_embedding: self.context.temporal_embedding,
                streams: self.context.streams,
            },
            blocks: m.blocks,
            schedule: ScheduleConfig {
                steps: m.diffusion_steps,
                beta_start: m.beta_start,
                beta_end: m.beta_end,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch: t.batch,
            adam: AdamConfig {
                lr: t.lr,
                clip_norm: t.clip_norm,
                ..Default::default()
            },
            loss: t.loss,
            cond_dropout: t.cond_dropout,
            freeze_backbone: t.freeze_backbone,
            repeat_noise: false,
            seed: self.seed,
        }
    }

    pub fn mask_threshold(&self) -> f64 {
        let s = self.latent_size();
        self.context
            .mask_threshold
            .unwrap_or_else(|| crate::geometry::default_threshold(s, s))
    }
}
