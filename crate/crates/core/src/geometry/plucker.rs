use nalgebra::Vector3;

use super::{CameraPose, Intrinsics};
use crate::error::{Error, Result};

/// Unnormalized per-pixel ray directions `R^T K^-1 [u, v, 1]^T`, expressed in
/// the pose's reference frame. Row-major over the `h x w` grid.
pub fn ray_directions(
    k: &Intrinsics,
    pose: &CameraPose,
    h: usize,
    w: usize,
) -> Result<Vec<Vector3<f64>>> {
    k.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("ray grid must be at least 1x1"));
    }
    let to_ref = pose.rotation.transpose() * k.inverse_matrix();
    let mut out = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            out.push(to_ref * Vector3::new(u as f64, v as f64, 1.0));
        }
    }
    Ok(out)
}

/// Dense `h x w x 6` Plücker ray field: channels 0-2 hold the moment
/// `o x d'`, channels 3-5 the unit direction `d'`.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PluckerField {
    pub const CHANNELS: usize = 6;

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * Self::CHANNELS;
        &self.data[i..i + Self::CHANNELS]
    }

    pub fn moment(&self, u: usize, v: usize) -> Vector3<f64> {
        let p = self.pixel(u, v);
        Vector3::new(p[0], p[1], p[2])
    }

    pub fn direction(&self, u: usize, v: usize) -> Vector3<f64> {
        let p = self.pixel(u, v);
        Vector3::new(p[3], p[4], p[5])
    }
}

pub fn plucker_embedding(
    k: &Intrinsics,
    pose: &CameraPose,
    h: usize,
    w: usize,
) -> Result<PluckerField> {
    let dirs = ray_directions(k, pose, h, w)?;
    let origin = pose.center();
    let mut data = Vec::with_capacity(h * w * PluckerField::CHANNELS);
    for d in dirs {
        let d = d / d.norm();
        let m = origin.cross(&d);
        data.extend_from_slice(&[m.x, m.y, m.z, d.x, d.y, d.z]);
    }
    Ok(PluckerField {
        height: h,
        width: w,
        data,
    })
}
