use std::sync::Arc;

use rand::Rng;

use super::{EncoderConfig, SampleCondition};
use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::{
    sinusoidal_embedding, AttnLayout, ParamGroup, ParamId, ParamStore, QueryTransformer, Tape, Tensor, Var,
};

/// Token sets entering the semantic stream for a single sample.
#[derive(Debug, Clone)]
pub struct SemanticTokens {
    pub f_img: Tensor,
    pub f_txt: Tensor,
    pub f_ctx: Tensor,
    pub t_sem: Tensor,
}

#[derive(Debug, Clone)]
pub struct SemanticStream {
    /// Per-patch embedding of reference and context latents.
    pub patch_embed: Linear,
    pub text_table: ParamId,
    pub queries: ParamId,
    pub null_tokens: ParamId,
    pub qt: QueryTransformer,
}

impl SemanticStream {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        let m = cfg.semantic_queries;
        Ok(Self {
            patch_embed: Linear::new(store, "encoder.tokens.patch", ParamGroup::Backbone, cfg.latent_channels, d, true, rng),
            text_table: store.add_uniform("encoder.tokens.text", ParamGroup::Backbone, &[cfg.vocab_size, d], 1, rng),
            queries: store.add_uniform("encoder.semantic.queries", ParamGroup::ContextEncoder, &[m, d], 1, rng),
            null_tokens: store.add_uniform("encoder.semantic.null", ParamGroup::Backbone, &[m, d], 1, rng),
            qt: QueryTransformer::new(store, "encoder.semantic.qt", ParamGroup::ContextEncoder, cfg.semantic, rng)?,
        })
    }

    pub(super) fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &EncoderConfig,
        samples: &[SampleCondition],
        keep: &[bool],
    ) -> Result<Var> {
        let (b, m, d, hw) = (samples.len(), cfg.semantic_queries, cfg.dim, cfg.pixels());
        let tile: Arc<Vec<u32>> = Arc::new((0..b).flat_map(|_| 0..m as u32).collect());
        let null = tape.param(store, self.null_tokens);
        let null = tape.gather_rows(null, tile.clone())?;
        if keep.iter().all(|&k| !k) {
            return Ok(null);
        }

        let c = cfg.latent_channels;
        let mut refs = Vec::with_capacity(b * hw * c);
        let mut caption = Vec::new();
        let mut ctx_lat = Vec::new();
        let mut ctx_temb = Vec::new();
        let use_ctx = cfg.streams.semantic();
        for s in samples {
            refs.extend_from_slice(s.z_ref.data());
            for &tok in &s.caption {
                if tok >= cfg.vocab_size {
                    return Err(Error::OutOfRange(format!("token {tok} outside vocabulary of {}", cfg.vocab_size)));
                }
                caption.push(tok as u32);
            }
            if let (true, Some(ctx)) = (use_ctx, &s.context) {
                ctx_lat.extend_from_slice(ctx.latents.data());
                for &fi in &ctx.frame_indices {
                    let e = if cfg.temporal_embedding {
                        sinusoidal_embedding(fi, d)?
                    } else {
                        vec![0.0; d]
                    };
                    for _ in 0..hw {
                        ctx_temb.extend_from_slice(&e);
                    }
                }
            }
        }
        let refs = tape.constant(Tensor::from_matrix(b * hw, c, refs));
        let mut parts = vec![self.patch_embed.forward(tape, store, refs)?];
        if !caption.is_empty() {
            let table = tape.param(store, self.text_table);
            parts.push(tape.gather_rows(table, Arc::new(caption))?);
        }
        if !ctx_lat.is_empty() {
            let rows = ctx_lat.len() / c;
            let lat = tape.constant(Tensor::from_matrix(rows, c, ctx_lat));
            let tok = self.patch_embed.forward(tape, store, lat)?;
            let temb = tape.constant(Tensor::from_matrix(rows, d, ctx_temb));
            parts.push(tape.add(tok, temb)?);
        }
        let context = tape.concat_rows(&parts)?;

        let mut layout = AttnLayout::new();
        let (mut txt_off, mut ctx_off) = (b * hw, b * hw + samples.iter().map(|s| s.caption.len()).sum::<usize>());
        for (i, s) in samples.iter().enumerate() {
            let mut k_rows: Vec<usize> = (i * hw..(i + 1) * hw).collect();
            k_rows.extend(txt_off..txt_off + s.caption.len());
            txt_off += s.caption.len();
            if let (true, Some(ctx)) = (use_ctx, &s.context) {
                let n = ctx.views() * hw;
                k_rows.extend(ctx_off..ctx_off + n);
                ctx_off += n;
            }
            layout.push_group(i * m..(i + 1) * m, k_rows, None)?;
        }

        let queries = tape.param(store, self.queries);
        let queries = tape.gather_rows(queries, tile)?;
        let out = self.qt.forward(tape, store, queries, context, Arc::new(layout))?;
        if keep.iter().all(|&k| k) {
            return Ok(out);
        }
        let on: Vec<f64> = keep.iter().flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, m)).collect();
        let off: Vec<f64> = on.iter().map(|v| 1.0 - v).collect();
        let out = tape.row_scale(out, Arc::new(on))?;
        let null = tape.row_scale(null, Arc::new(off))?;
        tape.add(out, null)
    }
}

/// `F_sem`: the latent queries `T_sem` attending over `[F_img, F_txt, F_ctx]`.
pub fn encode_semantic(tokens: &SemanticTokens, qt: &QueryTransformer, store: &ParamStore) -> Result<Tensor> {
    if tokens.f_ctx.rows() == 0 {
        return Err(Error::MissingContext);
    }
    let d = qt.cfg.dim;
    for t in [&tokens.f_img, &tokens.f_txt, &tokens.f_ctx, &tokens.t_sem] {
        if t.rows() > 0 && t.cols() != d {
            return Err(Error::shape(format!("semantic token dim {} != {d}", t.cols())));
        }
    }
    let parts: Vec<&Tensor> = [&tokens.f_img, &tokens.f_txt, &tokens.f_ctx]
        .into_iter()
        .filter(|t| t.rows() > 0)
        .collect();
    let context = Tensor::concat_rows(&parts)?;
    crate::nn::query_transformer(&tokens.t_sem, &context, qt, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::QueryTransformerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(zero_out: bool) -> (ParamStore, QueryTransformer, SemanticTokens) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = QueryTransformerConfig { layers: 2, dim: 8, heads: 2, ffn_mult: 2 };
        let qt = QueryTransformer::new(&mut store, "qt", ParamGroup::ContextEncoder, cfg, &mut rng).unwrap();
        if !zero_out {
            for id in store.ids().collect::<Vec<_>>() {
                if store.entry(id).name.contains(".out.") || store.entry(id).name.contains(".down.") {
                    *store.get_mut(id) = Tensor::randn(store.get(id).shape(), 0.3, &mut rng);
                }
            }
        }
        let tokens = SemanticTokens {
            f_img: Tensor::randn(&[3, 8], 1.0, &mut rng),
            f_txt: Tensor::randn(&[2, 8], 1.0, &mut rng),
            f_ctx: Tensor::randn(&[6, 8], 1.0, &mut rng),
            t_sem: Tensor::randn(&[4, 8], 1.0, &mut rng),
        };
        (store, qt, tokens)
    }

    #[test]
    fn zero_residual_projections_pass_queries_through() {
        let (store, qt, tokens) = setup(true);
        assert_eq!(encode_semantic(&tokens, &qt, &store).unwrap(), tokens.t_sem);
    }

    #[test]
    fn context_view_order_does_not_matter() {
        let (store, qt, tokens) = setup(false);
        let a = encode_semantic(&tokens, &qt, &store).unwrap();
        // Two views of three tokens each, swapped.
        let swapped = Tensor::concat_rows(&[&tokens.f_ctx.slice_rows(3, 3), &tokens.f_ctx.slice_rows(0, 3)]).unwrap();
        let b = encode_semantic(&SemanticTokens { f_ctx: swapped, ..tokens.clone() }, &qt, &store).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
        assert_ne!(a, tokens.t_sem);
    }

    #[test]
    fn missing_context_is_rejected() {
        let (store, qt, tokens) = setup(true);
        let empty = SemanticTokens { f_ctx: Tensor::zeros(&[0, 8]), ..tokens };
        assert!(matches!(encode_semantic(&empty, &qt, &store), Err(Error::MissingContext)));
    }
}
