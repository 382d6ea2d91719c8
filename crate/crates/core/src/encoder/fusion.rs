use std::sync::Arc;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::{ParamGroup, ParamStore, Tape, Tensor, Var};

/// Zero-initialized 3D convolution over `[z_ref; F_vis]` whose output is
/// added to `z_ref`.
#[derive(Debug, Clone)]
pub struct FusionGate {
    pub conv: Linear,
    pub kernel: usize,
}

impl FusionGate {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Self {
        let k3 = cfg.gate_kernel.pow(3);
        Self {
            conv: Linear::zeros(
                store,
                "encoder.gate.conv",
                ParamGroup::ContextEncoder,
                (cfg.latent_channels + cfg.dim) * k3,
                cfg.latent_channels,
                true,
            ),
            kernel: cfg.gate_kernel,
        }
    }

    /// `keep` zeroes the gate's contribution on selected rows.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &EncoderConfig,
        z_ref: Var,
        f_vis: Var,
        batch: usize,
        keep: Option<Arc<Vec<f64>>>,
    ) -> Result<Var> {
        let x = tape.concat_cols(&[z_ref, f_vis])?;
        let cols = tape.unfold3d(x, [batch, cfg.frames, cfg.height, cfg.width], self.kernel)?;
        let mut g = self.conv.forward(tape, store, cols)?;
        if let Some(k) = keep {
            g = tape.row_scale(g, k)?;
        }
        tape.add(z_ref, g)
    }
}

/// `z_ref + ZeroConv3D([z_ref; F_vis])` for one clip laid out as
/// `(T*h*w) x C` and `(T*h*w) x D`.
pub fn fuse_pixel_condition(
    z_ref: &Tensor,
    f_vis: &Tensor,
    gate: &FusionGate,
    cfg: &EncoderConfig,
    store: &ParamStore,
) -> Result<Tensor> {
    let rows = cfg.frames * cfg.pixels();
    if z_ref.rows() != rows || z_ref.cols() != cfg.latent_channels {
        return Err(Error::shape("z_ref shape"));
    }
    if f_vis.rows() != rows || f_vis.cols() != cfg.dim {
        return Err(Error::shape("F_vis shape"));
    }
    let mut tape = Tape::inference();
    let z = tape.constant(z_ref.clone());
    let f = tape.constant(f_vis.clone());
    let out = gate.forward(&mut tape, store, cfg, z, f, 1, None)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::test_util::tiny_config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs() -> (EncoderConfig, Tensor, Tensor) {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = cfg.frames * cfg.pixels();
        (
            cfg,
            Tensor::randn(&[rows, cfg.latent_channels], 1.0, &mut rng),
            Tensor::randn(&[rows, cfg.dim], 1.0, &mut rng),
        )
    }

    #[test]
    fn zero_gate_is_identity() {
        let (cfg, z, f) = inputs();
        let mut store = ParamStore::new();
        let gate = FusionGate::new(&mut store, &cfg);
        assert_eq!(fuse_pixel_condition(&z, &f, &gate, &cfg, &store).unwrap(), z);
    }

    #[test]
    fn center_tap_projection_adds_projected_features() {
        let (cfg, z, f) = inputs();
        let mut store = ParamStore::new();
        let gate = FusionGate::new(&mut store, &cfg);
        let (c, d) = (cfg.latent_channels, cfg.dim);
        let center = (cfg.gate_kernel.pow(3) - 1) / 2;
        // Project F_vis channel i onto output channel i % C.
        let w = store.get_mut(gate.conv.weight);
        for i in 0..d {
            let row = center * (c + d) + c + i;
            w.data_mut()[row * c + i % c] = 1.0;
        }
        let out = fuse_pixel_condition(&z, &f, &gate, &cfg, &store).unwrap();
        for r in 0..z.rows() {
            for ch in 0..c {
                let proj: f64 = (0..d).filter(|i| i % c == ch).map(|i| f.row(r)[i]).sum();
                assert!((out.row(r)[ch] - z.row(r)[ch] - proj).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_is_linear_in_features() {
        let (cfg, z, f) = inputs();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gate = FusionGate::new(&mut store, &cfg);
        let shape = store.get(gate.conv.weight).shape().to_vec();
        *store.get_mut(gate.conv.weight) = Tensor::randn(&shape, 0.2, &mut rng);
        let fuse = |f: &Tensor| fuse_pixel_condition(&z, f, &gate, &cfg, &store).unwrap();
        let one = fuse(&f);
        let two = fuse(&f.scale(2.0));
        let zero = fuse(&Tensor::zeros(f.shape()));
        let lhs = two.zip_map(&one, |a, b| a - b).unwrap();
        let rhs = one.zip_map(&zero, |a, b| a - b).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }
}
