//! Toy latent video diffusion: linear noise schedule, closed-form noising,
//! an epsilon-prediction denoiser conditioned on the context encoder,
//! uniform and log-weighted losses, and DDIM sampling with classifier-free
//! guidance.

mod denoiser;
mod loss;
mod model;
mod sampler;
mod schedule;
mod train;

pub use denoiser::{Denoiser, DenoiserBlock};
pub use loss::{loss_log_weighted, loss_uniform, log_frame_weights, per_frame_sq_errors, row_weights, LossKind};
pub use model::{ModelConfig, VideoModel};
pub use sampler::{cfg_combine, ddim_from, ddim_sample, ddim_timesteps, DdimOptions};
pub use schedule::{build_schedule, forward_noising, noising_step, NoiseSchedule, ScheduleConfig};
pub use train::{train, write_loss_trace, TrainConfig, TrainRecord, TrainingClip};

#[cfg(test)]
pub(crate) mod test_util {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoder::{ContextInput, SampleCondition};
    use crate::geometry::EpipolarMask;
    use crate::nn::Tensor;

    pub fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            encoder: crate::encoder::test_util::tiny_config(),
            blocks: 1,
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn clip(cfg: &ModelConfig, views: usize, seed: u64) -> TrainingClip {
        let e = &cfg.encoder;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, hw, c) = (e.frames, e.pixels(), e.latent_channels);
        let mut mask = EpipolarMask::all_ones(t, views.max(1), e.height, e.width);
        for r in 0..mask.rows() {
            mask.bits.set(r, (r * 5 + 1) % mask.cols(), false);
        }
        TrainingClip {
            z0: Tensor::randn(&[t * hw, c], 1.0, &mut rng),
            cond: SampleCondition {
                z_ref: Tensor::randn(&[hw, c], 1.0, &mut rng),
                plucker: Tensor::randn(&[t * hw, 6], 1.0, &mut rng),
                caption: vec![0, 2, 4],
                frame_indices: (0..t).map(|k| k as f64).collect(),
                context: (views > 0).then(|| ContextInput {
                    latents: Tensor::randn(&[views * hw, c], 1.0, &mut rng),
                    frame_indices: (0..views).map(|j| (t + 1 + j) as f64).collect(),
                    mask: Arc::new(mask),
                }),
            },
        }
    }
}
