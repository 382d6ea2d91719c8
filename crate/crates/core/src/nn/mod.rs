//! Deterministic tensor and neural-network kernels: masked attention,
//! reverse-mode autodiff, layers, embeddings, the latent codec, gradient
//! checking and checkpoints.

pub mod attention;
pub mod checkpoint;
pub mod codec;
pub mod embedding;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use attention::{
    attention_blocked, attention_forward, epi_cross_attention, stable_softmax, AttentionInputs,
    AttnLayout,
};
pub use codec::PatchCodec;
pub use embedding::sinusoidal_embedding;
pub use gradcheck::{grad_check, grad_check_params};
pub use layers::{query_transformer, QueryTransformer, QueryTransformerConfig};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
