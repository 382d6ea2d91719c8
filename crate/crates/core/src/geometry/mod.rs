//! Pinhole camera geometry: poses, intrinsics, ray fields, Plücker
//! embeddings, epipolar relations and mask construction.
//!
//! Conventions used throughout:
//! - poses are world-to-camera, `x_cam = R x_world + t`;
//! - camera axes follow OpenCV (x right, y down, z forward);
//! - the pixel with column `u` and row `v` sits at coordinate `(u, v)`,
//!   and grids are flattened row-major as `v * width + u`.

mod epipolar;
mod mask;
mod plucker;
pub mod posefile;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use epipolar::{
    epipolar_line, fundamental_matrix, point_line_distance, skew, EpipolarLine,
    DEGENERATE_LINE_EPS, PURE_ROTATION_EPS,
};
pub use mask::{default_threshold, epipolar_mask, BitMatrix, EpipolarMask};
pub use plucker::{plucker_embedding, ray_directions, PluckerField};

/// Tolerance for the orthonormality and determinant checks on rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point with the given horizontal field of view.
    pub fn from_fov(fov_x_rad: f64, width: usize, height: usize) -> Result<Self> {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_rad).tan();
        Self::new(
            fx,
            fx,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("zero image size".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Closed-form inverse of the upper-triangular calibration matrix.
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Intrinsics of the grid obtained by averaging non-overlapping
    /// `patch x patch` blocks (the latent grid of a patch codec).
    pub fn downsample(&self, patch: usize) -> Result<Self> {
        if patch == 0 || self.width % patch != 0 || self.height % patch != 0 {
            return Err(Error::shape(format!(
                "{}x{} image not divisible by patch {patch}",
                self.width, self.height
            )));
        }
        let p = patch as f64;
        let shift = (p - 1.0) / 2.0;
        Self::new(
            self.fx / p,
            self.fy / p,
            (self.cx - shift) / p,
            (self.cy - shift) / p,
            self.width / patch,
            self.height / patch,
        )
    }

    /// Projects a point in camera coordinates; `None` behind the camera.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<(f64, f64)> {
        if p_cam.z <= 1e-12 {
            return None;
        }
        Some((
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }
}

/// Rigid world-to-camera transform `[R | t]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose of a camera centred at `center` whose world-to-camera rotation
    /// is `rotation`.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        Self::new(rotation, -(rotation * center))
    }

    /// Rotation by `angle` about `axis`, with translation `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: *r.matrix(),
            translation: t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if !r.iter().chain(self.translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > ROTATION_TOL {
            return Err(Error::InvalidPose(format!(
                "R^T R deviates from I by {ortho:e}"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}")));
        }
        Ok(())
    }

    /// Camera centre in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Snaps a nearly orthonormal matrix onto SO(3) via SVD.
    pub fn orthonormalized(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let svd = rotation.svd(true, true);
        let (u, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => (u, vt),
            _ => return Err(Error::InvalidPose("SVD failed".into())),
        };
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Self::new(r, translation)
    }
}

/// Transform mapping camera-`a` coordinates to camera-`b` coordinates:
/// `R = R_b R_a^T`, `t = t_b - R t_a`.
pub fn relative_pose(a: &CameraPose, b: &CameraPose) -> CameraPose {
    let rotation = b.rotation * a.rotation.transpose();
    CameraPose {
        rotation,
        translation: b.translation - rotation * a.translation,
    }
}

/// Re-expresses a trajectory relative to its first camera, so that the
/// first pose becomes exactly the identity.
pub fn rebase_to_first(poses: &[CameraPose]) -> Vec<CameraPose> {
    match poses.split_first() {
        Some((first, rest)) => std::iter::once(CameraPose::identity())
            .chain(rest.iter().map(|p| relative_pose(first, p)))
            .collect(),
        None => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 3.9, 3.9, 4, 4).is_ok());
    }

    #[test]
    fn inverse_matrix_matches_numeric_inverse() {
        let k = Intrinsics::new(31.0, 29.5, 15.2, 14.1, 32, 32).unwrap();
        let diff = k.inverse_matrix() - k.matrix().try_inverse().unwrap();
        assert!(diff.abs().max() < 1e-14);
    }

    #[test]
    fn downsample_keeps_projection_consistent() {
        // A point projecting to the centre of latent cell (u, v) lands in
        // the middle of the corresponding p x p block.
        let k = Intrinsics::new(40.0, 40.0, 15.5, 15.5, 32, 32).unwrap();
        let kl = k.downsample(4).unwrap();
        let p = Vector3::new(0.3, -0.2, 2.0);
        let (u, v) = k.project(&p).unwrap();
        let (ul, vl) = kl.project(&p).unwrap();
        assert!((ul - (u - 1.5) / 4.0).abs() < 1e-12);
        assert!((vl - (v - 1.5) / 4.0).abs() < 1e-12);
        assert!(k.downsample(3).is_err());
    }

    #[test]
    fn pose_validation() {
        assert!(CameraPose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        assert!(CameraPose::new(flip, Vector3::zeros()).is_err());
        let p = CameraPose::from_axis_angle(Vector3::new(1.0, 2.0, 3.0), 0.7, Vector3::x());
        p.validate().unwrap();
    }

    #[test]
    fn relative_pose_identities() {
        let b = CameraPose::from_axis_angle(Vector3::y(), 0.4, Vector3::new(1.0, 2.0, 3.0));
        let same = relative_pose(&b, &b);
        assert!((same.rotation - Matrix3::identity()).abs().max() < 1e-15);
        assert!(same.translation.norm() < 1e-15);
        let r = relative_pose(&CameraPose::identity(), &b);
        assert_eq!(r.rotation, b.rotation);
        assert_eq!(r.translation, b.translation);
    }

    #[test]
    fn orthonormalize_snaps_noisy_rotation() {
        let p = CameraPose::from_axis_angle(Vector3::new(0.3, 1.0, -0.2), 1.1, Vector3::zeros());
        let noisy = p.rotation + Matrix3::from_element(1e-6);
        let fixed = CameraPose::orthonormalized(noisy, Vector3::zeros()).unwrap();
        assert!((fixed.rotation - p.rotation).abs().max() < 1e-5);
    }
}
