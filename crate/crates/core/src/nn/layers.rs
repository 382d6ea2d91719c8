use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::AttnLayout;
use super::params::{ParamGroup, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), group, &[fan_in, fan_out], fan_in, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), group, &[fan_out]));
        Self { weight, bias }
    }

    /// A projection whose weight and bias start at exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = store.add_zeros(format!("{name}.weight"), group, &[fan_in, fan_out]);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), group, &[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[dim], 1.0)),
            beta: store.add_zeros(format!("{name}.beta"), group, &[dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer GELU MLP; the output projection starts at zero.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), group, dim_in, hidden, true, rng),
            down: Linear::zeros(store, &format!("{name}.down"), group, hidden, dim_out, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}

/// Multi-head attention with separate query and key/value inputs; the
/// output projection starts at zero.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        q_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            to_q: Linear::new(store, &format!("{name}.to_q"), group, q_dim, dim, false, rng),
            to_k: Linear::new(store, &format!("{name}.to_k"), group, kv_dim, dim, false, rng),
            to_v: Linear::new(store, &format!("{name}.to_v"), group, kv_dim, dim, false, rng),
            out: Linear::zeros(store, &format!("{name}.out"), group, dim, q_dim, true),
            heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let q = self.to_q.forward(tape, store, x_q)?;
        let k = self.to_k.forward(tape, store, x_kv)?;
        let v = self.to_v.forward(tape, store, x_kv)?;
        let a = tape.attention(q, k, v, self.heads, layout)?;
        self.out.forward(tape, store, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryTransformerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl QueryTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim % self.heads != 0 || self.ffn_mult == 0 {
            return Err(Error::config(format!("invalid query transformer config {self:?}")));
        }
        Ok(())
    }
}

impl Default for QueryTransformerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 32,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryTransformerLayer {
    pub norm_q: LayerNorm,
    pub norm_ctx: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

/// Stack of pre-norm cross-attention + feed-forward layers in which query
/// tokens gather information from a context token set.
#[derive(Debug, Clone)]
pub struct QueryTransformer {
    pub cfg: QueryTransformerConfig,
    pub layers: Vec<QueryTransformerLayer>,
}

impl QueryTransformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cfg: QueryTransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let layers = (0..cfg.layers)
            .map(|i| {
                let n = format!("{name}.layers.{i}");
                QueryTransformerLayer {
                    norm_q: LayerNorm::new(store, &format!("{n}.norm_q"), group, d),
                    norm_ctx: LayerNorm::new(store, &format!("{n}.norm_ctx"), group, d),
                    attn: MultiHeadAttention::new(store, &format!("{n}.attn"), group, d, d, d, cfg.heads, rng),
                    norm_ff: LayerNorm::new(store, &format!("{n}.norm_ff"), group, d),
                    ff: FeedForward::new(store, &format!("{n}.ff"), group, d, d * cfg.ffn_mult, d, rng),
                }
            })
            .collect();
        Ok(Self { cfg, layers })
    }

    /// `queries` and `context` rows are grouped by `layout`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        context: Var,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let mut x = queries;
        for layer in &self.layers {
            let qn = layer.norm_q.forward(tape, store, x)?;
            let cn = layer.norm_ctx.forward(tape, store, context)?;
            let a = layer.attn.forward(tape, store, qn, cn, layout.clone())?;
            x = tape.add(x, a)?;
            let h = layer.norm_ff.forward(tape, store, x)?;
            let f = layer.ff.forward(tape, store, h)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }
}

/// Runs a query transformer on one `M x D` query set attending to one
/// `L x D` context set.
pub fn query_transformer(
    queries: &Tensor,
    context: &Tensor,
    model: &QueryTransformer,
    store: &ParamStore,
) -> Result<Tensor> {
    let d = model.cfg.dim;
    if queries.cols() != d || context.cols() != d {
        return Err(Error::shape(format!(
            "query transformer dim {d} vs inputs {} / {}",
            queries.cols(),
            context.cols()
        )));
    }
    let mut tape = Tape::inference();
    let q = tape.constant(queries.clone());
    let c = tape.constant(context.clone());
    let layout = Arc::new(AttnLayout::dense(queries.rows(), context.rows(), None)?);
    let out = model.forward(&mut tape, store, q, c, layout)?;
    Ok(tape.value(out).clone())
}
