//! Context-aware, camera-controllable latent video diffusion at desk scale.
//!
//! The crate covers the geometric pipeline (Plücker ray embeddings,
//! fundamental matrices and epipolar attention masks), a small autodiff
//! and attention kernel layer, the dual-stream context encoder, a toy
//! latent diffusion model with DDIM sampling, evaluation metrics, and a
//! synthetic posed-scene harness that ties them together.

pub mod error;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod diffusion;
pub mod encoder;
pub mod nn;

pub use error::{Error, Result};
pub use geometry::{CameraPose, EpipolarMask, Intrinsics, PluckerField};
pub use image::Image;
pub use nn::Tensor;
