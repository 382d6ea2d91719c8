use crate::error::{Error, Result};
use crate::geometry::{rebase_to_first, CameraPose};

const ORTHO_TOL: f64 = 1e-6;

/// Estimated and reference pose sequences of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub estimated: Vec<CameraPose>,
    pub reference: Vec<CameraPose>,
}

impl TrajectoryPair {
    pub fn new(estimated: Vec<CameraPose>, reference: Vec<CameraPose>) -> Result<Self> {
        if estimated.len() != reference.len() {
            return Err(Error::shape(format!(
                "{} estimated poses vs {} reference poses",
                estimated.len(),
                reference.len()
            )));
        }
        for p in estimated.iter().chain(&reference) {
            let r = &p.rotation;
            let dev = (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max();
            if dev > ORTHO_TOL || !p.translation.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidPose(format!("rotation off SO(3) by {dev:e}")));
            }
        }
        Ok(Self { estimated, reference })
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    fn pairs(&self) -> impl Iterator<Item = (&CameraPose, &CameraPose)> {
        self.estimated.iter().zip(&self.reference)
    }
}

/// Sum of geodesic angles `acos((tr(R_est R_ref^T) - 1) / 2)` in radians.
///
/// Evaluated through the chord `|R_est - R_ref|_F = 2 sqrt(2) sin(angle / 2)`,
/// which stays accurate for tiny angles where `acos` near 1 does not.
pub fn rot_err(tp: &TrajectoryPair) -> f64 {
    tp.pairs()
        .map(|(e, r)| {
            let chord = (e.rotation - r.rotation).norm() / (2.0 * std::f64::consts::SQRT_2);
            2.0 * chord.min(1.0).asin()
        })
        .sum()
}

/// Sum of translation distances.
pub fn trans_err(tp: &TrajectoryPair) -> f64 {
    tp.pairs().map(|(e, r)| (e.translation - r.translation).norm()).sum()
}

/// Sum of Frobenius norms of the `3x4` extrinsic differences.
pub fn cam_mc(tp: &TrajectoryPair) -> f64 {
    tp.pairs()
        .map(|(e, r)| {
            let dr = (e.rotation - r.rotation).norm_squared();
            let dt = (e.translation - r.translation).norm_squared();
            (dr + dt).sqrt()
        })
        .sum()
}

fn path_length(poses: &[CameraPose]) -> f64 {
    poses.windows(2).map(|w| (w[1].center() - w[0].center()).norm()).sum()
}

/// Rebases both trajectories to their first frame and scales translations
/// so the reference path length is 1 (unchanged when it is 0).
pub fn normalize_trajectory(tp: &TrajectoryPair) -> TrajectoryPair {
    let est = rebase_to_first(&tp.estimated);
    let refs = rebase_to_first(&tp.reference);
    let len = path_length(&refs);
    let scale = if len > 0.0 { 1.0 / len } else { 1.0 };
    let scaled = |ps: Vec<CameraPose>| -> Vec<CameraPose> {
        ps.into_iter()
            .map(|p| CameraPose {
                rotation: p.rotation,
                translation: p.translation * scale,
            })
            .collect()
    };
    TrajectoryPair {
        estimated: scaled(est),
        reference: scaled(refs),
    }
}
