use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::encoder::{ConditionSet, ContextEncoder, EncoderConfig, SampleCondition};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::{ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub blocks: usize,
    pub schedule: ScheduleConfig,
}

/// Context encoder plus denoiser sharing one parameter store.
#[derive(Debug, Clone)]
pub struct VideoModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: ContextEncoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl VideoModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::config("denoiser needs at least one block"));
        }
        let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ContextEncoder::new(&mut store, cfg.encoder, &mut rng)?;
        let denoiser = Denoiser::new(&mut store, &cfg.encoder, cfg.blocks, &mut rng);
        Ok(Self {
            cfg,
            store,
            encoder,
            denoiser,
            schedule,
        })
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, samples: &[SampleCondition], keep: &[bool]) -> Result<ConditionSet> {
        self.encoder.encode(tape, store, samples, keep)
    }

    /// Predicted noise for `z_t` (`(B*T*h*w) x C`) at per-sample steps.
    pub fn predict_eps(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_t: Var,
        timesteps: &[usize],
        samples: &[SampleCondition],
        keep: &[bool],
    ) -> Result<Var> {
        let cond = self.encode(tape, store, samples, keep)?;
        self.denoiser.forward(tape, store, &self.cfg.encoder, z_t, timesteps, &cond)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "model": self.cfg, "extra": extra });
        save_checkpoint(path, &self.store, &meta)
    }

    /// Loads a checkpoint written by [`VideoModel::save`], returning the
    /// extra metadata alongside the model.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = load_checkpoint(path)?;
        let cfg: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut model = Self::new(cfg, 0)?;
        let loaded = model.store.load_matching(&store)?;
        if loaded != model.store.len() || store.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {} ({loaded} matched)",
                store.len(),
                model.store.len()
            )));
        }
        Ok((model, meta["extra"].clone()))
    }
}
