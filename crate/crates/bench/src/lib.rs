//! Fixtures shared by the kernel benchmarks.

use camctx::geometry::{CameraPose, Intrinsics};
use camctx::nn::Tensor;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Query and context poses scattered around the origin, all looking
/// roughly down +z, with `h x w` latent-grid intrinsics.
pub fn rig(frames: usize, views: usize, h: usize, w: usize, seed: u64) -> (Vec<CameraPose>, Vec<CameraPose>, Intrinsics) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = |rng: &mut ChaCha8Rng| {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        CameraPose::from_axis_angle(axis, rng.random_range(0.0..0.3), t)
    };
    let q = (0..frames).map(|_| pose(&mut rng)).collect();
    let c = (0..views).map(|_| pose(&mut rng)).collect();
    let k = Intrinsics::from_fov(60f64.to_radians(), w, h).expect("valid intrinsics");
    (q, c, k)
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[rows, cols], 1.0, &mut rng)
}
