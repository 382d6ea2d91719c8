use std::sync::Arc;

use rand::Rng;

use crate::encoder::{ConditionSet, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{sinusoidal_embedding, AttnLayout, ParamGroup, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct DenoiserBlock {
    pub norm_s: LayerNorm,
    pub spatial: MultiHeadAttention,
    pub norm_t: LayerNorm,
    pub temporal: MultiHeadAttention,
    pub norm_c: LayerNorm,
    pub cross: MultiHeadAttention,
    pub norm_f: LayerNorm,
    pub ff: FeedForward,
}

/// Epsilon predictor over `(B*T*h*w) x C` latents. The input is the noisy
/// latent concatenated with the pixel condition and Plücker rays; each block
/// runs spatial, temporal and semantic cross-attention and an FFN, all
/// pre-norm residual. The output head starts at zero.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub input: Linear,
    pub time_in: Linear,
    pub time_out: Linear,
    pub blocks: Vec<DenoiserBlock>,
    pub norm_out: LayerNorm,
    pub out: Linear,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, blocks: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Backbone;
        let (c, d, h) = (cfg.latent_channels, cfg.dim, cfg.heads);
        let blocks = (0..blocks)
            .map(|i| {
                let n = format!("denoiser.blocks.{i}");
                DenoiserBlock {
                    norm_s: LayerNorm::new(store, &format!("{n}.norm_s"), g, d),
                    spatial: MultiHeadAttention::new(store, &format!("{n}.spatial"), g, d, d, d, h, rng),
                    norm_t: LayerNorm::new(store, &format!("{n}.norm_t"), g, d),
                    temporal: MultiHeadAttention::new(store, &format!("{n}.temporal"), g, d, d, d, h, rng),
                    norm_c: LayerNorm::new(store, &format!("{n}.norm_c"), g, d),
                    cross: MultiHeadAttention::new(store, &format!("{n}.cross"), g, d, d, d, h, rng),
                    norm_f: LayerNorm::new(store, &format!("{n}.norm_f"), g, d),
                    ff: FeedForward::new(store, &format!("{n}.ff"), g, d, d * cfg.ffn_mult, d, rng),
                }
            })
            .collect();
        Self {
            input: Linear::new(store, "denoiser.input", g, 2 * c + 6, d, true, rng),
            time_in: Linear::new(store, "denoiser.time.0", g, d, d, true, rng),
            time_out: Linear::new(store, "denoiser.time.1", g, d, d, true, rng),
            blocks,
            norm_out: LayerNorm::new(store, "denoiser.norm_out", g, d),
            out: Linear::zeros(store, "denoiser.out", g, d, c, true),
        }
    }

    /// `timesteps[b]` is the diffusion step of sample `b`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &EncoderConfig,
        z_t: Var,
        timesteps: &[usize],
        cond: &ConditionSet,
    ) -> Result<Var> {
        let b = cond.batch;
        let (t, hw, c, d, m) = (cfg.frames, cfg.pixels(), cfg.latent_channels, cfg.dim, cfg.semantic_queries);
        let rows = b * t * hw;
        if tape.shape(z_t) != (rows, c) || timesteps.len() != b {
            return Err(Error::shape(format!(
                "denoiser input {:?} for batch {b} of {t}x{hw}x{c}",
                tape.shape(z_t)
            )));
        }
        if tape.shape(cond.semantic) != (b * m, d) || tape.shape(cond.pixel) != (rows, c) {
            return Err(Error::shape("condition set does not match the denoiser"));
        }

        let x = tape.concat_cols(&[z_t, cond.pixel, cond.plucker])?;
        let mut h = self.input.forward(tape, store, x)?;

        let mut pos = Vec::with_capacity(rows * d);
        for _ in 0..b {
            for k in 0..t {
                let e = sinusoidal_embedding(k as f64, d)?;
                for _ in 0..hw {
                    pos.extend_from_slice(&e);
                }
            }
        }
        let pos = tape.constant(Tensor::from_matrix(rows, d, pos));
        h = tape.add(h, pos)?;

        let mut temb = Vec::with_capacity(b * d);
        for &ts in timesteps {
            temb.extend(sinusoidal_embedding(ts as f64, d)?);
        }
        let temb = tape.constant(Tensor::from_matrix(b, d, temb));
        let temb = self.time_in.forward(tape, store, temb)?;
        let temb = tape.silu(temb);
        let temb = self.time_out.forward(tape, store, temb)?;
        h = tape.add_grouped(h, temb, t * hw)?;

        let spatial = Arc::new(AttnLayout::blocks(rows, hw));
        let temporal = Arc::new(AttnLayout::strided(b, t, hw));
        let mut cross = AttnLayout::new();
        for i in 0..b {
            cross.push_group(i * t * hw..(i + 1) * t * hw, i * m..(i + 1) * m, None)?;
        }
        let cross = Arc::new(cross);

        for blk in &self.blocks {
            let n = blk.norm_s.forward(tape, store, h)?;
            let a = blk.spatial.forward(tape, store, n, n, spatial.clone())?;
            h = tape.add(h, a)?;
            let n = blk.norm_t.forward(tape, store, h)?;
            let a = blk.temporal.forward(tape, store, n, n, temporal.clone())?;
            h = tape.add(h, a)?;
            let n = blk.norm_c.forward(tape, store, h)?;
            let a = blk.cross.forward(tape, store, n, cond.semantic, cross.clone())?;
            h = tape.add(h, a)?;
            let n = blk.norm_f.forward(tape, store, h)?;
            let f = blk.ff.forward(tape, store, n)?;
            h = tape.add(h, f)?;
        }
        let n = self.norm_out.forward(tape, store, h)?;
        self.out.forward(tape, store, n)
    }
}
