use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::dataset::{clip_condition, extract_clip, render_video, Clip, ClipSpec, ConditionOptions, ContextStrategy, Video};
use crate::diffusion::{ddim_sample, DdimOptions, train, write_loss_trace, TrainRecord, TrainingClip, VideoModel};
use crate::encoder::MAX_CONTEXT;
use crate::error::{Error, Result};
use crate::geometry::posefile::{write_pose_file, PoseRecord};
use crate::geometry::Intrinsics;
use crate::image::Image;
use crate::metrics::{cam_mc, mse_per_frame, normalize_trajectory, rot_err, ssim_per_frame, trans_err, MetricReport, TrajectoryPair};
use crate::nn::{PatchCodec, Tensor};

/// Offset separating evaluation scene seeds from training scene seeds.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

/// Rendered training and evaluation videos plus the fitted codec.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub codec: Arc<PatchCodec>,
    pub image_k: Intrinsics,
    pub latent_k: Intrinsics,
    pub train: Vec<Video>,
    pub eval: Vec<Video>,
}

impl Corpus {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        Self::generate_with_codec(cfg, None)
    }

    /// Like [`generate`](Self::generate), reusing `codec` instead of
    /// fitting one when given (e.g. the codec stored with a checkpoint).
    pub fn generate_with_codec(cfg: &ExperimentConfig, codec: Option<Arc<PatchCodec>>) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let image_k = Intrinsics::from_fov(d.fov_deg.to_radians(), d.image_size, d.image_size)?;
        let latent_k = image_k.downsample(d.patch)?;
        let videos = |count: usize, offset: u64| -> Result<Vec<Video>> {
            (0..count)
                .map(|i| {
                    let kind = d.kinds[i % d.kinds.len()];
                    render_video(d.scene_seed_base + offset + i as u64, kind, d.video_len, &image_k)
                })
                .collect()
        };
        let train = videos(d.train_scenes, 0)?;
        let eval = videos(d.eval_scenes, EVAL_SEED_OFFSET)?;
        let codec = match codec {
            Some(c) if c.patch != d.patch || c.channels != d.latent_channels => {
                return Err(Error::config(format!(
                    "codec is {}x{} patches with {} channels, config wants {}x{} with {}",
                    c.patch, c.patch, c.channels, d.patch, d.patch, d.latent_channels
                )))
            }
            Some(c) => c,
            None => {
                let sample: Vec<Image> = train.iter().flat_map(|v| v.frames.iter().step_by(4).cloned()).collect();
                if sample.is_empty() {
                    return Err(Error::config("no training frames to fit the codec on"));
                }
                Arc::new(PatchCodec::fit(&sample, d.patch, d.latent_channels)?)
            }
        };
        Ok(Self {
            codec,
            image_k,
            latent_k,
            train,
            eval,
        })
    }

    pub fn condition_options(&self, cfg: &ExperimentConfig) -> ConditionOptions {
        ConditionOptions {
            codec: self.codec.clone(),
            latent_k: self.latent_k,
            use_context: cfg.context.enabled,
            epipolar_mask: cfg.context.epipolar_mask,
            threshold: cfg.mask_threshold(),
        }
    }
}

/// Training clips: random strides and 1..=4 context frames sampled after
/// the clip window.
pub fn training_set(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<TrainingClip>> {
    let opts = corpus.condition_options(cfg);
    let d = &cfg.data;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1b_c0de);
    let mut specs = Vec::new();
    for (i, v) in corpus.train.iter().enumerate() {
        for _ in 0..d.clips_per_scene {
            let spec = ClipSpec {
                scene_seed: v.scene.seed,
                kind: v.kind,
                frames: d.frames,
                stride: rng.random_range(1..=d.max_stride),
                strategy: ContextStrategy::RangeAfterEnd,
                n_ctx: rng.random_range(1..=MAX_CONTEXT),
            };
            specs.push((i, spec, rng.random::<u64>()));
        }
    }
    specs
        .par_iter()
        .map(|(i, spec, seed)| clip_condition(&extract_clip(&corpus.train[*i], spec, *seed)?, &opts))
        .collect()
}

/// One evaluation clip per evaluation video, using the configured strategy.
pub fn eval_clips(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<Clip>> {
    corpus
        .eval
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let spec = ClipSpec {
                scene_seed: v.scene.seed,
                kind: v.kind,
                frames: cfg.data.frames,
                stride: cfg.data.eval_stride,
                strategy: cfg.context.strategy,
                n_ctx: cfg.context.n,
            };
            extract_clip(v, &spec, cfg.seed.wrapping_add(i as u64))
        })
        .collect()
}

/// Builds a model (optionally from `init_checkpoint`) and trains it.
pub fn train_model(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(VideoModel, Vec<TrainRecord>)> {
    let data = training_set(cfg, corpus)?;
    let mut model = VideoModel::new(cfg.model_config(), cfg.seed)?;
    if let Some(path) = &cfg.train.init_checkpoint {
        let (init, _) = VideoModel::load(Path::new(path))?;
        model.store.load_matching(&init.store)?;
    }
    let trace = train(&mut model, &data, &cfg.train_config())?;
    Ok((model, trace))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub clips: Vec<Clip>,
    pub generated: Vec<Vec<Image>>,
}

fn decode_video(codec: &PatchCodec, latents: &Tensor, frames: usize, h: usize, w: usize) -> Result<Vec<Image>> {
    let c = codec.channels;
    (0..frames)
        .map(|k| {
            let frame = latents.slice_rows(k * h * w, h * w).reshape(&[h, w, c])?;
            codec.decode(&frame)
        })
        .collect()
}

/// Samples every evaluation clip and averages the per-frame metrics.
pub fn evaluate(model: &VideoModel, cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Evaluation> {
    let clips = eval_clips(cfg, corpus)?;
    let opts = corpus.condition_options(cfg);
    let (h, w) = (corpus.latent_k.height, corpus.latent_k.width);
    let frames = cfg.data.frames;
    let generated = clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let cond = clip_condition(clip, &opts)?.cond;
            let seed = cfg.seed.wrapping_mul(7919).wrapping_add(i as u64);
            let opts = DdimOptions {
                clip_x0: cfg.sample.clip_x0,
                ..DdimOptions::new(cfg.sample.ddim_steps, cfg.sample.cfg_scale, seed)
            };
            let z = ddim_sample(model, &[cond], &opts)?;
            decode_video(&corpus.codec, &z[0], frames, h, w)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = clips.len().max(1) as f64;
    let (mut mse, mut ssim) = (vec![0.0; frames], vec![0.0; frames]);
    let (mut re, mut te, mut mc) = (0.0, 0.0, 0.0);
    for (clip, gen) in clips.iter().zip(&generated) {
        for (acc, v) in mse.iter_mut().zip(mse_per_frame(gen, &clip.frames)?) {
            *acc += v / n;
        }
        for (acc, v) in ssim.iter_mut().zip(ssim_per_frame(gen, &clip.frames)?) {
            *acc += v / n;
        }
        // No pose estimator runs on generated frames; the trajectory metrics
        // compare the conditioning trajectory with itself unless external
        // estimates are supplied.
        let tp = normalize_trajectory(&TrajectoryPair::new(clip.poses.clone(), clip.poses.clone())?);
        re += rot_err(&tp) / n;
        te += trans_err(&tp) / n;
        mc += cam_mc(&tp) / n;
    }
    let c = &cfg.context;
    let report = MetricReport::new(mse, ssim, re, te, mc)?
        .with_header("seed", cfg.seed)
        .with_header("context", c.enabled)
        .with_header("strategy", c.strategy)
        .with_header("ctx_n", c.n)
        .with_header("epipolar_mask", c.epipolar_mask)
        .with_header("mask_threshold", cfg.mask_threshold())
        .with_header("temporal_embedding", c.temporal_embedding)
        .with_header("streams", format!("{:?}", c.streams).to_lowercase())
        .with_header("freeze_backbone", cfg.train.freeze_backbone)
        .with_header("cfg_scale", cfg.sample.cfg_scale)
        .with_header("ddim_steps", cfg.sample.ddim_steps)
        .with_header("clip_x0", cfg.sample.clip_x0.map_or("none".to_string(), |c| c.to_string()))
        .with_header("clips", clips.len());
    Ok(Evaluation {
        report,
        clips,
        generated,
    })
}

/// Writes generated and reference frames plus the clip trajectory.
pub fn write_clips(eval: &Evaluation, k: &Intrinsics, dir: &Path) -> Result<()> {
    for (i, (clip, gen)) in eval.clips.iter().zip(&eval.generated).enumerate() {
        let d = dir.join(format!("clip_{i:02}"));
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (j, (g, r)) in gen.iter().zip(&clip.frames).enumerate() {
            g.write_ppm(&d.join(format!("gen_{j:02}.ppm")))?;
            r.write_ppm(&d.join(format!("gt_{j:02}.ppm")))?;
        }
        for (j, f) in clip.context_frames.iter().enumerate() {
            f.write_ppm(&d.join(format!("ctx_{j}.ppm")))?;
        }
        let recs: Vec<PoseRecord> = clip
            .frame_ids
            .iter()
            .zip(&clip.poses)
            .map(|(&id, p)| PoseRecord::new(id as u64, k, *p))
            .collect();
        write_pose_file(&d.join("poses.txt"), &recs)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: MetricReport,
    pub trace: Vec<TrainRecord>,
    pub dir: PathBuf,
}

pub fn checkpoint_meta(cfg: &ExperimentConfig, corpus: &Corpus) -> serde_json::Value {
    serde_json::json!({ "codec": *corpus.codec, "experiment": cfg.to_toml() })
}

/// Reads back the codec and experiment config stored by [`checkpoint_meta`].
pub fn parse_checkpoint_meta(meta: &serde_json::Value) -> Result<(Arc<PatchCodec>, ExperimentConfig)> {
    let codec: PatchCodec = serde_json::from_value(meta["codec"].clone())
        .map_err(|e| Error::Checkpoint(format!("codec metadata: {e}")))?;
    let text = meta["experiment"]
        .as_str()
        .ok_or_else(|| Error::Checkpoint("missing experiment config".into()))?;
    Ok((Arc::new(codec), ExperimentConfig::from_toml(text)?))
}

/// Generates data, trains, samples and evaluates; writes `config.toml`,
/// `loss.csv`, `model.ckpt`, `metrics.csv` and `clips/` under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    let corpus = Corpus::generate(cfg).map_err(|e| e.in_stage("synth"))?;
    let (model, trace) = train_model(cfg, &corpus).map_err(|e| e.in_stage("train"))?;
    write_loss_trace(&out_dir.join("loss.csv"), &trace).map_err(|e| e.in_stage("train"))?;
    model
        .save(&out_dir.join("model.ckpt"), checkpoint_meta(cfg, &corpus))
        .map_err(|e| e.in_stage("train"))?;
    let eval = evaluate(&model, cfg, &corpus).map_err(|e| e.in_stage("sample"))?;
    write_clips(&eval, &corpus.image_k, &out_dir.join("clips")).map_err(|e| e.in_stage("sample"))?;
    eval.report.write(&out_dir.join("metrics.csv")).map_err(|e| e.in_stage("eval"))?;
    Ok(ExperimentOutput {
        report: eval.report,
        trace,
        dir: out_dir.to_path_buf(),
    })
}
