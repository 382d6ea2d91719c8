use std::sync::Arc;

use rand::Rng;

use super::{EncoderConfig, SampleCondition};
use crate::error::{Error, Result};
use crate::geometry::{BitMatrix, EpipolarMask};
use crate::image::Image;
use crate::nn::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{sinusoidal_embedding, AttnLayout, ParamGroup, ParamId, ParamStore, PatchCodec, Tape, Tensor, Var};

/// Inputs of the visual stream for one clip.
#[derive(Debug, Clone)]
pub struct VisualContext {
    /// `Z_ctx`, `(N*h*w) x C`.
    pub z_ctx: Tensor,
    pub mask: EpipolarMask,
}

/// Pixel-wise learnable tokens `T_vis` gathering context features under
/// the epipolar mask, followed by a temporal FFN.
#[derive(Debug, Clone)]
pub struct VisualStream {
    pub tokens: ParamId,
    pub kv_embed: Linear,
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_t: LayerNorm,
    pub temporal: FeedForward,
}

struct Item<'a> {
    latents: &'a Tensor,
    mask: Arc<BitMatrix>,
    frame_indices: &'a [f64],
}

impl VisualStream {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let g = ParamGroup::ContextEncoder;
        let (d, c) = (cfg.dim, cfg.latent_channels);
        Self {
            tokens: store.add_uniform("encoder.visual.tokens", g, &[cfg.frames * cfg.pixels(), d], 1, rng),
            kv_embed: Linear::new(store, "encoder.visual.kv_embed", g, c, d, true, rng),
            norm_q: LayerNorm::new(store, "encoder.visual.norm_q", g, d),
            norm_kv: LayerNorm::new(store, "encoder.visual.norm_kv", g, d),
            attn: MultiHeadAttention::new(store, "encoder.visual.attn", g, d, d, d, cfg.heads, rng),
            norm_t: LayerNorm::new(store, "encoder.visual.norm_t", g, d),
            temporal: FeedForward::new(
                store,
                "encoder.visual.temporal",
                g,
                d + cfg.temporal_dim,
                d * cfg.ffn_mult,
                d,
                rng,
            ),
        }
    }

    pub(super) fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &EncoderConfig,
        samples: &[SampleCondition],
    ) -> Result<Var> {
        let items = samples
            .iter()
            .map(|s| {
                let ctx = s.context.as_ref().ok_or(Error::MissingContext)?;
                Ok(Item {
                    latents: &ctx.latents,
                    mask: Arc::new(checked_mask(&ctx.mask, cfg, ctx.views())?.bits.clone()),
                    frame_indices: &s.frame_indices,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.forward_items(tape, store, cfg, &items)
    }

    fn forward_items(&self, tape: &mut Tape, store: &ParamStore, cfg: &EncoderConfig, items: &[Item<'_>]) -> Result<Var> {
        let (t, hw, c, d) = (cfg.frames, cfg.pixels(), cfg.latent_channels, cfg.dim);
        let rows = t * hw;
        let mut lat = Vec::new();
        let mut temb = Vec::with_capacity(items.len() * rows * cfg.temporal_dim);
        let mut layout = AttnLayout::new();
        let mut k_off = 0;
        for (b, it) in items.iter().enumerate() {
            if it.latents.cols() != c || it.latents.rows() != it.mask.cols() {
                return Err(Error::shape("context latents do not match the mask"));
            }
            if it.frame_indices.len() != t {
                return Err(Error::shape("frame index count"));
            }
            lat.extend_from_slice(it.latents.data());
            for &fi in it.frame_indices {
                let e = if cfg.temporal_embedding {
                    sinusoidal_embedding(fi, cfg.temporal_dim)?
                } else {
                    vec![0.0; cfg.temporal_dim]
                };
                for _ in 0..hw {
                    temb.extend_from_slice(&e);
                }
            }
            let n = it.latents.rows();
            layout.push_group(b * rows..(b + 1) * rows, k_off..k_off + n, Some(it.mask.clone()))?;
            k_off += n;
        }
        let tile: Vec<u32> = (0..items.len()).flat_map(|_| 0..rows as u32).collect();
        let tokens = tape.param(store, self.tokens);
        let x = tape.gather_rows(tokens, Arc::new(tile))?;
        let lat = tape.constant(Tensor::from_matrix(k_off, c, lat));
        let kv = self.kv_embed.forward(tape, store, lat)?;
        let kv = self.norm_kv.forward(tape, store, kv)?;
        let q = self.norm_q.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, q, kv, Arc::new(layout))?;
        let h = tape.add(x, a)?;
        let hn = self.norm_t.forward(tape, store, h)?;
        let temb = tape.constant(Tensor::from_matrix(items.len() * rows, cfg.temporal_dim, temb));
        let cat = tape.concat_cols(&[hn, temb])?;
        let f = self.temporal.forward(tape, store, cat)?;
        debug_assert_eq!(tape.shape(f).1, d);
        tape.add(h, f)
    }
}

fn checked_mask<'a>(mask: &'a EpipolarMask, cfg: &EncoderConfig, views: usize) -> Result<&'a EpipolarMask> {
    if mask.frames != cfg.frames || mask.views != views || mask.height != cfg.height || mask.width != cfg.width {
        return Err(Error::shape(format!(
            "mask is {}x{} views over {}x{}, expected {}x{views} over {}x{}",
            mask.frames, mask.views, mask.height, mask.width, cfg.frames, cfg.height, cfg.width
        )));
    }
    Ok(mask)
}

/// `F_vis`, `(T*h*w) x D`, for one clip.
pub fn encode_visual(
    ctx: &VisualContext,
    frame_indices: &[f64],
    stream: &VisualStream,
    cfg: &EncoderConfig,
    store: &ParamStore,
) -> Result<Tensor> {
    let hw = cfg.pixels();
    if ctx.z_ctx.rows() == 0 {
        return Err(Error::MissingContext);
    }
    if ctx.z_ctx.rows() % hw != 0 {
        return Err(Error::shape("context latents are not whole frames"));
    }
    let mask = checked_mask(&ctx.mask, cfg, ctx.z_ctx.rows() / hw)?;
    let item = Item {
        latents: &ctx.z_ctx,
        mask: Arc::new(mask.bits.clone()),
        frame_indices,
    };
    let mut tape = Tape::inference();
    let out = stream.forward_items(&mut tape, store, cfg, &[item])?;
    Ok(tape.value(out).clone())
}

/// Encodes each context frame with the codec and stacks the latents into
/// `(N*h*w) x C`.
pub fn embed_context_frames(frames: &[Image], codec: &PatchCodec) -> Result<Tensor> {
    let latents = frames.iter().map(|f| codec.encode(f)).collect::<Result<Vec<_>>>()?;
    let c = codec.channels;
    let data: Vec<f64> = latents.iter().flat_map(|l| l.data().iter().copied()).collect();
    Ok(Tensor::from_matrix(data.len() / c, c, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::test_util::tiny_config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.5, rng);
        }
    }

    fn setup(temporal: bool) -> (EncoderConfig, ParamStore, VisualStream, VisualContext) {
        let mut cfg = tiny_config();
        cfg.temporal_embedding = temporal;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let stream = VisualStream::new(&mut store, &cfg, &mut rng);
        randomize(&mut store, &mut rng);
        let hw = cfg.pixels();
        let ctx = VisualContext {
            z_ctx: Tensor::randn(&[2 * hw, cfg.latent_channels], 1.0, &mut rng),
            mask: EpipolarMask::all_ones(cfg.frames, 2, cfg.height, cfg.width),
        };
        (cfg, store, stream, ctx)
    }

    #[test]
    fn output_shape_and_view_permutation() {
        let (cfg, store, stream, mut ctx) = setup(true);
        let hw = cfg.pixels();
        // Make the mask nontrivial so the permutation must carry it along.
        for r in 0..ctx.mask.rows() {
            ctx.mask.bits.set(r, r % (2 * hw), false);
        }
        let a = encode_visual(&ctx, &[0.0, 1.0], &stream, &cfg, &store).unwrap();
        assert_eq!((a.rows(), a.cols()), (cfg.frames * hw, cfg.dim));
        let swapped = VisualContext {
            z_ctx: Tensor::concat_rows(&[&ctx.z_ctx.slice_rows(hw, hw), &ctx.z_ctx.slice_rows(0, hw)]).unwrap(),
            mask: ctx.mask.permute_views(&[1, 0]),
        };
        let b = encode_visual(&swapped, &[0.0, 1.0], &stream, &cfg, &store).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn masked_context_pixels_have_no_influence() {
        let (cfg, store, stream, mut ctx) = setup(true);
        // Context pixel 0 of view 1 is masked for every query.
        let col = cfg.pixels();
        for r in 0..ctx.mask.rows() {
            ctx.mask.bits.set(r, col, false);
        }
        let a = encode_visual(&ctx, &[0.0, 1.0], &stream, &cfg, &store).unwrap();
        let mut perturbed = ctx.clone();
        for v in perturbed.z_ctx.data_mut()[col * cfg.latent_channels..(col + 1) * cfg.latent_channels].iter_mut() {
            *v += 3.0;
        }
        let b = encode_visual(&perturbed, &[0.0, 1.0], &stream, &cfg, &store).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn temporal_embedding_separates_frames() {
        let (cfg, store, stream, ctx) = setup(true);
        let hw = cfg.pixels();
        let a = encode_visual(&ctx, &[0.0, 0.0], &stream, &cfg, &store).unwrap();
        let b = encode_visual(&ctx, &[0.0, 15.0], &stream, &cfg, &store).unwrap();
        assert_eq!(a.slice_rows(0, hw), b.slice_rows(0, hw));
        assert!(a.slice_rows(hw, hw).max_abs_diff(&b.slice_rows(hw, hw)) > 1e-6);

        let (cfg, store, stream, ctx) = setup(false);
        let a = encode_visual(&ctx, &[0.0, 0.0], &stream, &cfg, &store).unwrap();
        let b = encode_visual(&ctx, &[0.0, 15.0], &stream, &cfg, &store).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (cfg, store, stream, ctx) = setup(true);
        let empty = VisualContext {
            z_ctx: Tensor::zeros(&[0, cfg.latent_channels]),
            ..ctx.clone()
        };
        assert!(matches!(
            encode_visual(&empty, &[0.0, 1.0], &stream, &cfg, &store),
            Err(Error::MissingContext)
        ));
        let wrong = VisualContext {
            mask: EpipolarMask::all_ones(cfg.frames, 1, cfg.height, cfg.width),
            ..ctx
        };
        assert!(encode_visual(&wrong, &[0.0, 1.0], &stream, &cfg, &store).is_err());
    }

    #[test]
    fn embeds_frames_in_order() {
        let codec = PatchCodec::identity();
        let a = Image::filled(3, 2, [0.1, 0.2, 0.3]);
        let b = Image::filled(3, 2, [0.5, 0.5, 0.5]);
        let z = embed_context_frames(&[a.clone()], &codec).unwrap();
        assert_eq!((z.rows(), z.cols()), (6, 3));
        let z2 = embed_context_frames(&[a.clone(), a, b], &codec).unwrap();
        assert_eq!(z2.slice_rows(0, 6), z2.slice_rows(6, 6));
        assert_eq!(z2.row(12), &[0.5, 0.5, 0.5]);
    }
}
