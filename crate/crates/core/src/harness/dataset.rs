use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::render_view;
use super::scene::{generate_scene, Scene, PALETTE};
use super::trajectory::{make_trajectory, TrajectoryKind, TrajectoryParams};
use crate::diffusion::TrainingClip;
use crate::encoder::{embed_context_frames, ContextInput, SampleCondition, MAX_CONTEXT};
use crate::error::{Error, Result};
use crate::geometry::{epipolar_mask, plucker_embedding, relative_pose, CameraPose, EpipolarMask, Intrinsics};
use crate::image::Image;
use crate::nn::{PatchCodec, Tensor};

pub const MAX_STRIDE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextStrategy {
    /// Uniformly among the frames after the clip window.
    RangeAfterEnd,
    /// The frames immediately after the last clip frame.
    EndPlus1,
    /// The last frames of the video.
    Furthest,
}

impl ContextStrategy {
    pub const ALL: [ContextStrategy; 3] = [Self::RangeAfterEnd, Self::EndPlus1, Self::Furthest];

    pub fn name(self) -> &'static str {
        match self {
            Self::RangeAfterEnd => "range_after_end",
            Self::EndPlus1 => "end_plus_1",
            Self::Furthest => "furthest",
        }
    }
}

impl std::fmt::Display for ContextStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ContextStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown context strategy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub scene_seed: u64,
    pub kind: TrajectoryKind,
    pub frames: usize,
    pub stride: usize,
    pub strategy: ContextStrategy,
    pub n_ctx: usize,
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("clip needs at least one frame"));
        }
        if !(1..=MAX_STRIDE).contains(&self.stride) {
            return Err(Error::config(format!("stride {} outside 1..={MAX_STRIDE}", self.stride)));
        }
        if !(1..=MAX_CONTEXT).contains(&self.n_ctx) {
            return Err(Error::config(format!("context count {} outside 1..={MAX_CONTEXT}", self.n_ctx)));
        }
        Ok(())
    }

    /// Video indices of the clip frames, starting at 0.
    pub fn frame_ids(&self) -> Vec<usize> {
        (0..self.frames).map(|k| k * self.stride).collect()
    }

    pub fn last_id(&self) -> usize {
        (self.frames - 1) * self.stride
    }
}

/// Context frame indices for `clip` within a video of `video_poses.len()`
/// frames, sorted ascending.
pub fn sample_context(clip: &ClipSpec, video_poses: &[CameraPose], seed: u64) -> Result<Vec<usize>> {
    clip.validate()?;
    let len = video_poses.len();
    let first = clip.last_id() + 1;
    let available = len.saturating_sub(first);
    if available < clip.n_ctx {
        return Err(Error::InsufficientContext(format!(
            "{len}-frame video leaves {available} frames after index {} but {} are needed",
            clip.last_id(),
            clip.n_ctx
        )));
    }
    let mut ids: Vec<usize> = match clip.strategy {
        ContextStrategy::RangeAfterEnd => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, available, clip.n_ctx).into_iter().map(|i| first + i).collect()
        }
        ContextStrategy::EndPlus1 => (first..first + clip.n_ctx).collect(),
        ContextStrategy::Furthest => (len - clip.n_ctx..len).collect(),
    };
    ids.sort_unstable();
    Ok(ids)
}

/// Closed caption vocabulary: template words followed by palette names.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["a", "room", "with", "box", "and", "walls"];
    v.extend(PALETTE.iter().map(|(n, _)| *n));
    v
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let vocab = vocabulary();
    text.split_whitespace()
        .map(|w| {
            vocab
                .iter()
                .position(|v| *v == w)
                .ok_or_else(|| Error::config(format!("word '{w}' not in the caption vocabulary")))
        })
        .collect()
}

pub fn caption(scene: &Scene) -> String {
    format!(
        "a room with a {} box and {} walls",
        PALETTE[scene.dominant_box_color()].0,
        PALETTE[scene.walls[5]].0
    )
}

/// A rendered synthetic video.
#[derive(Debug, Clone)]
pub struct Video {
    pub scene: Scene,
    pub kind: TrajectoryKind,
    pub poses: Vec<CameraPose>,
    pub intrinsics: Intrinsics,
    pub frames: Vec<Image>,
}

/// Random trajectory parameters for a scene.
pub fn trajectory_params(kind: TrajectoryKind, rng: &mut impl Rng) -> TrajectoryParams {
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    match kind {
        TrajectoryKind::Pan => TrajectoryParams {
            angle: sign * rng.random_range(0.8..1.2),
            distance: sign * rng.random_range(0.3..0.6),
            heading,
            ..Default::default()
        },
        TrajectoryKind::Orbit => TrajectoryParams {
            angle: sign * rng.random_range(0.6..0.9),
            radius: rng.random_range(1.5..2.2),
            heading,
            ..Default::default()
        },
        TrajectoryKind::Dolly => TrajectoryParams {
            distance: rng.random_range(1.0..1.6),
            angle: 0.0,
            heading,
            ..Default::default()
        },
    }
}

pub fn render_video(scene_seed: u64, kind: TrajectoryKind, len: usize, k: &Intrinsics) -> Result<Video> {
    let scene = generate_scene(scene_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x5eed_7a11);
    let params = trajectory_params(kind, &mut rng);
    let poses = make_trajectory(kind, len, &params)?;
    let frames = poses
        .par_iter()
        .map(|p| render_view(&scene, p, k, k.height, k.width))
        .collect();
    Ok(Video {
        scene,
        kind,
        poses,
        intrinsics: *k,
        frames,
    })
}

/// Frames, poses and context of one clip, with poses relative to the first
/// clip frame.
#[derive(Debug, Clone)]
pub struct Clip {
    pub spec: ClipSpec,
    pub frame_ids: Vec<usize>,
    pub context_ids: Vec<usize>,
    pub frames: Vec<Image>,
    pub poses: Vec<CameraPose>,
    pub context_frames: Vec<Image>,
    pub context_poses: Vec<CameraPose>,
    pub caption: Vec<usize>,
}

pub fn extract_clip(video: &Video, spec: &ClipSpec, seed: u64) -> Result<Clip> {
    let context_ids = sample_context(spec, &video.poses, seed)?;
    let frame_ids = spec.frame_ids();
    let first = video.poses[0];
    let rebase = |i: &usize| relative_pose(&first, &video.poses[*i]);
    Ok(Clip {
        spec: *spec,
        frames: frame_ids.iter().map(|&i| video.frames[i].clone()).collect(),
        poses: frame_ids.iter().map(rebase).collect(),
        context_frames: context_ids.iter().map(|&i| video.frames[i].clone()).collect(),
        context_poses: context_ids.iter().map(rebase).collect(),
        caption: tokenize(&caption(&video.scene))?,
        frame_ids,
        context_ids,
    })
}

/// How a clip is turned into model conditioning.
#[derive(Debug, Clone)]
pub struct ConditionOptions {
    pub codec: Arc<PatchCodec>,
    /// Intrinsics of the latent grid.
    pub latent_k: Intrinsics,
    pub use_context: bool,
    pub epipolar_mask: bool,
    pub threshold: f64,
}

impl ConditionOptions {
    pub fn mask(&self, clip: &Clip) -> Result<EpipolarMask> {
        let (h, w) = (self.latent_k.height, self.latent_k.width);
        if self.epipolar_mask {
            epipolar_mask(&clip.poses, &clip.context_poses, &self.latent_k, h, w, self.threshold)
        } else {
            Ok(EpipolarMask::all_ones(clip.poses.len(), clip.context_poses.len(), h, w))
        }
    }
}

/// Clean latents and condition for one clip.
pub fn clip_condition(clip: &Clip, opts: &ConditionOptions) -> Result<TrainingClip> {
    let codec = &opts.codec;
    let (h, w) = (opts.latent_k.height, opts.latent_k.width);
    let z0 = embed_context_frames(&clip.frames, codec)?;
    let z_ref = codec.encode(&clip.frames[0])?;
    let z_ref = Tensor::from_matrix(h * w, codec.channels, z_ref.into_data());
    let mut pl = Vec::with_capacity(clip.poses.len() * h * w * 6);
    for p in &clip.poses {
        pl.extend(plucker_embedding(&opts.latent_k, p, h, w)?.data);
    }
    let stride = clip.spec.stride as f64;
    let context = if opts.use_context {
        Some(ContextInput {
            latents: embed_context_frames(&clip.context_frames, codec)?,
            frame_indices: clip.context_ids.iter().map(|&i| i as f64 / stride).collect(),
            mask: Arc::new(opts.mask(clip)?),
        })
    } else {
        None
    };
    Ok(TrainingClip {
        z0,
        cond: SampleCondition {
            z_ref,
            plucker: Tensor::from_matrix(clip.poses.len() * h * w, 6, pl),
            caption: clip.caption.clone(),
            frame_indices: (0..clip.poses.len()).map(|k| k as f64).collect(),
            context,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(strategy: ContextStrategy, n: usize, stride: usize) -> ClipSpec {
        ClipSpec {
            scene_seed: 0,
            kind: TrajectoryKind::Pan,
            frames: 16,
            stride,
            strategy,
            n_ctx: n,
        }
    }

    fn poses(n: usize) -> Vec<CameraPose> {
        vec![CameraPose::identity(); n]
    }

    #[test]
    fn named_strategies() {
        let v = poses(64);
        assert_eq!(sample_context(&spec(ContextStrategy::EndPlus1, 1, 1), &v, 0).unwrap(), vec![16]);
        assert_eq!(sample_context(&spec(ContextStrategy::EndPlus1, 1, 3), &v, 0).unwrap(), vec![46]);
        assert_eq!(sample_context(&spec(ContextStrategy::Furthest, 1, 1), &v, 0).unwrap(), vec![63]);
        assert_eq!(sample_context(&spec(ContextStrategy::Furthest, 3, 2), &v, 0).unwrap(), vec![61, 62, 63]);
    }

    #[test]
    fn range_after_end_support() {
        let v = poses(64);
        let mut seen = std::collections::HashSet::new();
        for seed in 0..1000 {
            let ids = sample_context(&spec(ContextStrategy::RangeAfterEnd, 2, 1), &v, seed).unwrap();
            assert_eq!(ids.len(), 2);
            assert!(ids[0] < ids[1]);
            assert!(ids.iter().all(|&i| i > 15 && i < 64));
            seen.extend(ids);
        }
        assert_eq!(seen.len(), 48);
        let a = sample_context(&spec(ContextStrategy::RangeAfterEnd, 4, 2), &v, 9).unwrap();
        assert_eq!(a, sample_context(&spec(ContextStrategy::RangeAfterEnd, 4, 2), &v, 9).unwrap());
    }

    #[test]
    fn short_videos_and_bad_specs_fail() {
        assert!(matches!(
            sample_context(&spec(ContextStrategy::Furthest, 1, 1), &poses(16), 0),
            Err(Error::InsufficientContext(_))
        ));
        assert!(sample_context(&spec(ContextStrategy::EndPlus1, 2, 1), &poses(17), 0).is_err());
        assert!(sample_context(&spec(ContextStrategy::EndPlus1, 0, 1), &poses(64), 0).is_err());
        assert!(sample_context(&spec(ContextStrategy::EndPlus1, 5, 1), &poses(64), 0).is_err());
        assert!(sample_context(&spec(ContextStrategy::EndPlus1, 1, 11), &poses(640), 0).is_err());
        assert!("random".parse::<ContextStrategy>().is_err());
        for s in ContextStrategy::ALL {
            assert_eq!(s.name().parse::<ContextStrategy>().unwrap(), s);
        }
    }

    #[test]
    fn captions_use_the_vocabulary() {
        for seed in 0..20 {
            let scene = generate_scene(seed);
            let toks = tokenize(&caption(&scene)).unwrap();
            assert!(toks.iter().all(|&t| t < vocabulary().len()));
        }
        assert!(tokenize("a purple elephant").is_err());
    }

    #[test]
    fn clip_conditions_have_consistent_shapes() {
        let k = Intrinsics::from_fov(70f64.to_radians(), 16, 16).unwrap();
        let video = render_video(3, TrajectoryKind::Orbit, 24, &k).unwrap();
        let s = ClipSpec { frames: 4, stride: 2, n_ctx: 2, ..spec(ContextStrategy::RangeAfterEnd, 2, 2) };
        let clip = extract_clip(&video, &s, 1).unwrap();
        assert_eq!(clip.poses[0], CameraPose::identity());
        let opts = ConditionOptions {
            codec: Arc::new(PatchCodec::fit(&video.frames, 4, 6).unwrap()),
            latent_k: k.downsample(4).unwrap(),
            use_context: true,
            epipolar_mask: true,
            threshold: 1.5,
        };
        let tc = clip_condition(&clip, &opts).unwrap();
        assert_eq!((tc.z0.rows(), tc.z0.cols()), (4 * 16, 6));
        assert_eq!(tc.cond.plucker.rows(), 4 * 16);
        let ctx = tc.cond.context.unwrap();
        assert_eq!(ctx.latents.rows(), 2 * 16);
        assert_eq!((ctx.mask.rows(), ctx.mask.cols()), (64, 32));
        assert!(ctx.frame_indices.iter().all(|&f| f > 3.0));
    }
}
