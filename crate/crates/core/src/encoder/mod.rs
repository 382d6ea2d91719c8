//! The context-aware encoder: a semantic stream that summarizes reference,
//! caption and context tokens with a query transformer, and a visual stream
//! in which per-pixel, per-timestep tokens gather features from posed
//! context latents under an epipolar mask. The visual output is blended
//! into the native reference-latent condition by a zero-initialized 3D
//! convolution.

mod fusion;
mod semantic;
mod visual;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EpipolarMask;
use crate::nn::{ParamStore, QueryTransformerConfig, Tape, Tensor, Var};

pub use fusion::{fuse_pixel_condition, FusionGate};
pub use semantic::{encode_semantic, SemanticStream, SemanticTokens};
pub use visual::{embed_context_frames, encode_visual, VisualContext, VisualStream};

/// Largest supported number of context views.
pub const MAX_CONTEXT: usize = 4;

/// Which context streams are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Streams {
    Both,
    Semantic,
    Visual,
}

impl Streams {
    pub fn semantic(self) -> bool {
        matches!(self, Streams::Both | Streams::Semantic)
    }

    pub fn visual(self) -> bool {
        matches!(self, Streams::Both | Streams::Visual)
    }
}

impl std::str::FromStr for Streams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Streams::Both),
            "semantic" => Ok(Streams::Semantic),
            "visual" => Ok(Streams::Visual),
            other => Err(Error::config(format!("unknown stream selection '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub latent_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub semantic: QueryTransformerConfig,
    pub semantic_queries: usize,
    pub vocab_size: usize,
    pub ffn_mult: usize,
    /// Width of the sinusoidal frame-index embedding in the visual stream.
    pub temporal_dim: usize,
    pub gate_kernel: usize,
    pub temporal_embedding: bool,
    pub streams: Streams,
}

impl EncoderConfig {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        self.semantic.validate()?;
        if self.semantic.dim != self.dim {
            return Err(Error::config("semantic stream dim must equal encoder dim"));
        }
        if self.dim % self.heads != 0 || self.dim % 2 != 0 {
            return Err(Error::config("encoder dim must be even and divisible by heads"));
        }
        if self.temporal_dim % 2 != 0 || self.temporal_dim == 0 {
            return Err(Error::config("temporal embedding dim must be even and positive"));
        }
        if self.gate_kernel % 2 == 0 {
            return Err(Error::config("fusion gate kernel must be odd"));
        }
        if self.frames == 0 || self.pixels() == 0 || self.semantic_queries == 0 || self.vocab_size == 0 {
            return Err(Error::config("encoder sizes must be positive"));
        }
        Ok(())
    }
}

/// Posed context views for one sample.
#[derive(Debug, Clone)]
pub struct ContextInput {
    /// Stacked codec latents `Z_ctx`, `(N*h*w) x C`.
    pub latents: Tensor,
    /// Source-frame index of each view, in clip frame units.
    pub frame_indices: Vec<f64>,
    pub mask: Arc<EpipolarMask>,
}

impl ContextInput {
    pub fn views(&self) -> usize {
        self.frame_indices.len()
    }
}

/// Raw conditioning for one clip.
#[derive(Debug, Clone)]
pub struct SampleCondition {
    /// Reference (first frame) latent, `(h*w) x C`.
    pub z_ref: Tensor,
    /// Plücker rays of every generated frame, `(T*h*w) x 6`.
    pub plucker: Tensor,
    pub caption: Vec<usize>,
    /// Index of each generated frame fed to the temporal embedding.
    pub frame_indices: Vec<f64>,
    pub context: Option<ContextInput>,
}

/// Encoded conditioning for a batch, ready for the denoiser.
#[derive(Debug, Clone, Copy)]
pub struct ConditionSet {
    pub batch: usize,
    /// `F_sem` (or null tokens), `(B*M) x D`.
    pub semantic: Var,
    /// Pixel-level condition `z_ref + gate([z_ref; F_vis])`, `(B*T*h*w) x C`.
    pub pixel: Var,
    /// `(B*T*h*w) x 6`.
    pub plucker: Var,
}

/// All encoder parameters.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub cfg: EncoderConfig,
    pub semantic: SemanticStream,
    pub visual: VisualStream,
    pub gate: FusionGate,
}

impl ContextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            semantic: SemanticStream::new(store, &cfg, rng)?,
            visual: VisualStream::new(store, &cfg, rng),
            gate: FusionGate::new(store, &cfg),
        })
    }

    /// Encodes a batch. `keep[b] == false` replaces the sample's semantic
    /// tokens with learned null tokens and drops its visual condition.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        samples: &[SampleCondition],
        keep: &[bool],
    ) -> Result<ConditionSet> {
        let cfg = &self.cfg;
        if samples.is_empty() || samples.len() != keep.len() {
            return Err(Error::shape("empty batch or keep-flag mismatch"));
        }
        let (t, hw, c) = (cfg.frames, cfg.pixels(), cfg.latent_channels);
        for s in samples {
            if s.z_ref.rows() != hw || s.z_ref.cols() != c {
                return Err(Error::shape(format!("z_ref is {}x{}, expected {hw}x{c}", s.z_ref.rows(), s.z_ref.cols())));
            }
            if s.plucker.rows() != t * hw || s.plucker.cols() != 6 {
                return Err(Error::shape("plucker field shape"));
            }
            if s.frame_indices.len() != t {
                return Err(Error::shape("frame index count"));
            }
            if let Some(ctx) = &s.context {
                if ctx.views() == 0 {
                    return Err(Error::MissingContext);
                }
                if ctx.views() > MAX_CONTEXT {
                    return Err(Error::TooManyContext(ctx.views(), MAX_CONTEXT));
                }
            }
        }
        let any_context = samples.iter().any(|s| s.context.is_some());
        if any_context && samples.iter().any(|s| s.context.is_none()) {
            return Err(Error::shape("a batch must be uniformly with or without context"));
        }

        let semantic = self.semantic.forward_batch(tape, store, cfg, samples, keep)?;

        // z_ref broadcast over time.
        let mut zref = Vec::with_capacity(samples.len() * t * hw * c);
        let mut pl = Vec::with_capacity(samples.len() * t * hw * 6);
        for s in samples {
            for _ in 0..t {
                zref.extend_from_slice(s.z_ref.data());
            }
            pl.extend_from_slice(s.plucker.data());
        }
        let rows = samples.len() * t * hw;
        let zref = tape.constant(Tensor::from_matrix(rows, c, zref));
        let plucker = tape.constant(Tensor::from_matrix(rows, 6, pl));

        let pixel = if any_context && cfg.streams.visual() && keep.iter().any(|&k| k) {
            let f_vis = self.visual.forward_batch(tape, store, cfg, samples)?;
            let keep_rows: Vec<f64> = keep
                .iter()
                .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, t * hw))
                .collect();
            self.gate.forward(tape, store, cfg, zref, f_vis, samples.len(), Some(Arc::new(keep_rows)))?
        } else {
            zref
        };
        Ok(ConditionSet {
            batch: samples.len(),
            semantic,
            pixel,
            plucker,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::test_util::tiny_config;
    use super::*;
    use crate::nn::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(cfg: &EncoderConfig, views: usize, rng: &mut ChaCha8Rng) -> SampleCondition {
        let (t, hw, c) = (cfg.frames, cfg.pixels(), cfg.latent_channels);
        let mut mask = EpipolarMask::all_ones(t, views, cfg.height, cfg.width);
        for r in 0..mask.rows() * views.min(1) {
            mask.bits.set(r, (r * 7) % mask.cols(), false);
        }
        SampleCondition {
            z_ref: Tensor::randn(&[hw, c], 1.0, rng),
            plucker: Tensor::randn(&[t * hw, 6], 1.0, rng),
            caption: vec![1, 3],
            frame_indices: (0..t).map(|i| i as f64).collect(),
            context: (views > 0).then(|| ContextInput {
                latents: Tensor::randn(&[views * hw, c], 1.0, rng),
                frame_indices: (0..views).map(|j| (t + 2 + j) as f64).collect(),
                mask: Arc::new(mask),
            }),
        }
    }

    #[test]
    fn fresh_encoder_passes_reference_through() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = ContextEncoder::new(&mut store, cfg, &mut rng).unwrap();
        let s = sample(&cfg, 2, &mut rng);
        let mut tape = Tape::inference();
        let out = enc.encode(&mut tape, &store, &[s.clone()], &[true]).unwrap();
        let pixel = tape.value(out.pixel).clone();
        let hw = cfg.pixels();
        for t in 0..cfg.frames {
            assert_eq!(pixel.slice_rows(t * hw, hw), s.z_ref);
        }
        // The semantic queries are unchanged by the zero-initialized query transformer.
        assert_eq!(tape.value(out.semantic), store.get(enc.semantic.queries));
    }

    #[test]
    fn view_count_is_validated() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = ContextEncoder::new(&mut store, cfg, &mut rng).unwrap();
        let mut tape = Tape::inference();
        let mut s = sample(&cfg, 1, &mut rng);
        s.context.as_mut().unwrap().frame_indices.clear();
        assert!(matches!(enc.encode(&mut tape, &store, &[s], &[true]), Err(Error::MissingContext)));
        let s = sample(&cfg, 5, &mut rng);
        assert!(matches!(
            enc.encode(&mut tape, &store, &[s], &[true]),
            Err(Error::TooManyContext(5, 4))
        ));
        let mixed = [sample(&cfg, 1, &mut rng), sample(&cfg, 0, &mut rng)];
        assert!(enc.encode(&mut tape, &store, &mixed, &[true, true]).is_err());
    }

    #[test]
    fn dropped_samples_use_null_tokens_and_no_visual_condition() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = ContextEncoder::new(&mut store, cfg, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
        }
        let batch = [sample(&cfg, 2, &mut rng), sample(&cfg, 2, &mut rng)];
        let mut tape = Tape::inference();
        let out = enc.encode(&mut tape, &store, &batch, &[true, false]).unwrap();
        let m = cfg.semantic_queries;
        let sem = tape.value(out.semantic);
        assert_eq!(sem.slice_rows(m, m), *store.get(enc.semantic.null_tokens));
        assert_ne!(sem.slice_rows(0, m), *store.get(enc.semantic.null_tokens));
        let rows = cfg.frames * cfg.pixels();
        let pixel = tape.value(out.pixel);
        for t in 0..cfg.frames {
            assert_eq!(pixel.slice_rows(rows + t * cfg.pixels(), cfg.pixels()), batch[1].z_ref);
        }
        assert_ne!(pixel.slice_rows(0, cfg.pixels()), batch[0].z_ref);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let enc = ContextEncoder::new(&mut store, cfg, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.4, &mut rng);
        }
        let batch = [sample(&cfg, 2, &mut rng), sample(&cfg, 1, &mut rng)];
        let wp = Tensor::randn(&[cfg.frames * cfg.pixels() * 2, cfg.latent_channels], 1.0, &mut rng);
        let ws = Tensor::randn(&[cfg.semantic_queries * 2, cfg.dim], 1.0, &mut rng);
        let report = grad_check_params(
            &store,
            |s, tape| {
                let out = enc.encode(tape, s, &batch, &[true, true])?;
                let a = tape.constant(wp.clone());
                let b = tape.constant(ws.clone());
                let p = tape.mul(out.pixel, a)?;
                let q = tape.mul(out.semantic, b)?;
                let p = tape.sum(p);
                let q = tape.sum(q);
                tape.add(p, q)
            },
            1e-5,
            3,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
