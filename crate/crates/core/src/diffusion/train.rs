use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{log_frame_weights, row_weights, LossKind};
use super::model::VideoModel;
use super::schedule::forward_noising;
use crate::encoder::SampleCondition;
use crate::error::{Error, Result};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{ParamGroup, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub loss: LossKind,
    /// Probability of replacing a sample's condition with the null branch.
    pub cond_dropout: f64,
    /// Train only the context encoder.
    pub freeze_backbone: bool,
    /// Reuse the same timesteps and noise every step (overfitting checks).
    pub repeat_noise: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 4,
            adam: AdamConfig::default(),
            loss: LossKind::LogWeighted,
            cond_dropout: 0.1,
            freeze_backbone: false,
            repeat_noise: false,
            seed: 0,
        }
    }
}

/// A training clip: clean latents `(T*h*w) x C` and their condition.
#[derive(Debug, Clone)]
pub struct TrainingClip {
    pub z0: Tensor,
    pub cond: SampleCondition,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    /// Uniform mean squared noise error.
    pub loss: f64,
    /// Log-weighted per-frame error.
    pub loss_weighted: f64,
}

pub fn train(model: &mut VideoModel, data: &[TrainingClip], cfg: &TrainConfig) -> Result<Vec<TrainRecord>> {
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let ecfg = model.cfg.encoder;
    let (t, hw, c) = (ecfg.frames, ecfg.pixels(), ecfg.latent_channels);
    let rows = t * hw;
    for clip in data {
        if clip.z0.rows() != rows || clip.z0.cols() != c {
            return Err(Error::shape("training clip latents do not match the model"));
        }
    }
    let objective = Arc::new(row_weights(cfg.loss, cfg.batch, t, hw, c));
    let uniform_w = row_weights(LossKind::Uniform, cfg.batch, t, hw, c);
    let log_w = row_weights(LossKind::LogWeighted, cfg.batch, t, hw, c);
    let has_log = t >= 2 && log_frame_weights(t).iter().any(|&w| w > 0.0);

    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise_seed: u64 = rng.random();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..data.len())).collect();
        let mut noise_rng = if cfg.repeat_noise {
            ChaCha8Rng::seed_from_u64(noise_seed)
        } else {
            ChaCha8Rng::seed_from_u64(rng.random())
        };
        let timesteps: Vec<usize> = (0..cfg.batch)
            .map(|_| noise_rng.random_range(1..=model.schedule.len()))
            .collect();
        let eps = Tensor::randn(&[cfg.batch * rows, c], 1.0, &mut noise_rng);
        let keep: Vec<bool> = (0..cfg.batch).map(|_| rng.random::<f64>() >= cfg.cond_dropout).collect();

        let mut zt = Vec::with_capacity(cfg.batch * rows * c);
        for (i, &p) in picks.iter().enumerate() {
            let e = eps.slice_rows(i * rows, rows);
            zt.extend(forward_noising(&data[p].z0, timesteps[i], &e, &model.schedule)?.into_data());
        }
        let samples: Vec<SampleCondition> = picks.iter().map(|&p| data[p].cond.clone()).collect();

        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_matrix(cfg.batch * rows, c, zt));
        let pred = model.predict_eps(&mut tape, &model.store, z, &timesteps, &samples, &keep)?;
        let eps = Arc::new(eps);
        let loss = tape.weighted_sq_err(pred, eps.clone(), objective.clone())?;

        let p = tape.value(pred);
        let weighted = |w: &[f64]| -> f64 {
            (0..cfg.batch * rows)
                .map(|r| w[r] * p.row(r).iter().zip(eps.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum()
        };
        let record = TrainRecord {
            step,
            loss: weighted(&uniform_w),
            loss_weighted: if has_log { weighted(&log_w) } else { f64::NAN },
        };
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        tape.backward(loss)?;
        let mut grads = tape.param_grads(&model.store);
        if cfg.freeze_backbone {
            grads.retain(|(id, _)| model.store.entry(*id).group == ParamGroup::ContextEncoder);
        }
        adam.step(&mut model.store, &grads);
        trace.push(record);
    }
    Ok(trace)
}

pub fn write_loss_trace(path: &Path, trace: &[TrainRecord]) -> Result<()> {
    let mut out = String::from("step,loss,loss_weighted\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.loss_weighted));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
