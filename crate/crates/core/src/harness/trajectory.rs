use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Pan,
    Orbit,
    Dolly,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pan" => Ok(Self::Pan),
            "orbit" => Ok(Self::Orbit),
            "dolly" => Ok(Self::Dolly),
            other => Err(Error::config(format!("unknown trajectory kind '{other}'"))),
        }
    }
}

/// Motion over the whole sequence. Progress follows a quadratic ease-out,
/// so the camera slows down towards the end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    /// Total yaw in radians (pan, orbit).
    pub angle: f64,
    /// Total travel in world units: sideways for pan, forward for dolly.
    pub distance: f64,
    /// Orbit radius around the point straight ahead of the start camera.
    pub radius: f64,
    /// Initial heading (yaw) of the camera.
    pub heading: f64,
    pub start: [f64; 3],
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            angle: 0.6,
            distance: 0.8,
            radius: 2.0,
            heading: 0.0,
            start: [0.0, 0.0, 0.0],
        }
    }
}

fn yaw(angle: f64) -> Matrix3<f64> {
    // Camera-to-world rotation about the (downward) y axis.
    *Rotation3::from_axis_angle(&Vector3::y_axis(), angle).matrix()
}

fn progress(k: usize, frames: usize) -> f64 {
    if frames <= 1 {
        return 0.0;
    }
    let s = k as f64 / (frames - 1) as f64;
    1.0 - (1.0 - s) * (1.0 - s)
}

/// World-to-camera poses along a trajectory of `frames` frames.
pub fn make_trajectory(kind: TrajectoryKind, frames: usize, p: &TrajectoryParams) -> Result<Vec<CameraPose>> {
    if frames == 0 {
        return Err(Error::config("trajectory needs at least one frame"));
    }
    let start = Vector3::from(p.start);
    (0..frames)
        .map(|k| {
            let s = progress(k, frames);
            let (rot_c2w, center) = match kind {
                TrajectoryKind::Pan => {
                    let r = yaw(p.heading + p.angle * s);
                    (r, start + yaw(p.heading) * Vector3::new(p.distance * s, 0.0, 0.0))
                }
                TrajectoryKind::Orbit => {
                    let target = start + yaw(p.heading) * Vector3::new(0.0, 0.0, p.radius);
                    let r = yaw(p.heading + p.angle * s);
                    (r, target - r * Vector3::new(0.0, 0.0, p.radius))
                }
                TrajectoryKind::Dolly => {
                    let r = yaw(p.heading);
                    (r, start + r * Vector3::new(0.0, 0.0, p.distance * s))
                }
            };
            CameraPose::from_center(rot_c2w.transpose(), center)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{rot_err, TrajectoryPair};

    #[test]
    fn stationary_dolly_is_constant() {
        let p = TrajectoryParams { distance: 0.0, ..Default::default() };
        let poses = make_trajectory(TrajectoryKind::Dolly, 10, &p).unwrap();
        assert!(poses.iter().all(|q| *q == poses[0]));
    }

    #[test]
    fn pan_turns_by_the_requested_angle() {
        for angle in [0.1, 0.5, 1.2] {
            let p = TrajectoryParams { angle, heading: 0.3, ..Default::default() };
            let poses = make_trajectory(TrajectoryKind::Pan, 16, &p).unwrap();
            let tp = TrajectoryPair::new(vec![poses[15]], vec![poses[0]]).unwrap();
            assert!((rot_err(&tp) - angle).abs() < 1e-9);
        }
    }

    #[test]
    fn orbit_keeps_the_target_centred() {
        let p = TrajectoryParams::default();
        let poses = make_trajectory(TrajectoryKind::Orbit, 12, &p).unwrap();
        let target = Vector3::new(0.0, 0.0, p.radius);
        for q in &poses {
            let c = q.transform_point(&target);
            assert!(c.x.abs() < 1e-9 && c.y.abs() < 1e-9 && (c.z - p.radius).abs() < 1e-9);
        }
    }

    #[test]
    fn all_kinds_produce_valid_poses() {
        for kind in [TrajectoryKind::Pan, TrajectoryKind::Orbit, TrajectoryKind::Dolly] {
            let poses = make_trajectory(kind, 64, &TrajectoryParams::default()).unwrap();
            assert_eq!(poses.len(), 64);
            for q in poses {
                q.validate().unwrap();
            }
        }
        assert!(make_trajectory(TrajectoryKind::Pan, 0, &TrajectoryParams::default()).is_err());
        assert!("spiral".parse::<TrajectoryKind>().is_err());
    }
}
