//! RealEstate10K-style camera files: one frame per line,
//!
//! ```text
//! timestamp fx fy cx cy 0 0 r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3
//! ```
//!
//! with intrinsics normalized by the image size and a row-major
//! world-to-camera `[R | t]`. A leading non-numeric line (the source URL in
//! the original dataset) is skipped.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{CameraPose, Intrinsics, ROTATION_TOL};
use crate::error::{Error, Result};

/// Rotations further than this from orthonormal are rejected outright;
/// between `ROTATION_TOL` and this they are snapped onto SO(3).
const LOOSE_ROTATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRecord {
    pub timestamp: u64,
    /// `fx / width`, `fy / height`, `cx / width`, `cy / height`.
    pub normalized_intrinsics: [f64; 4],
    pub pose: CameraPose,
}

impl PoseRecord {
    pub fn new(timestamp: u64, k: &Intrinsics, pose: CameraPose) -> Self {
        let (w, h) = (k.width as f64, k.height as f64);
        Self {
            timestamp,
            normalized_intrinsics: [k.fx / w, k.fy / h, k.cx / w, k.cy / h],
            pose,
        }
    }

    pub fn intrinsics(&self, width: usize, height: usize) -> Result<Intrinsics> {
        let [fx, fy, cx, cy] = self.normalized_intrinsics;
        let (w, h) = (width as f64, height as f64);
        Intrinsics::new(fx * w, fy * h, cx * w, cy * h, width, height)
    }

    pub fn to_line(&self) -> String {
        let mut s = String::with_capacity(256);
        let [fx, fy, cx, cy] = self.normalized_intrinsics;
        write!(s, "{} {fx} {fy} {cx} {cy} 0 0", self.timestamp).unwrap();
        let (r, t) = (&self.pose.rotation, &self.pose.translation);
        for i in 0..3 {
            write!(s, " {} {} {} {}", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]).unwrap();
        }
        s
    }
}

pub fn parse_pose_text(text: &str, file: &str) -> Result<Vec<PoseRecord>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            file: file.to_string(),
            line: idx + 1,
            msg,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if idx == 0 && tokens.len() == 1 && tokens[0].parse::<f64>().is_err() {
            continue;
        }
        if tokens.len() != 19 {
            return Err(err(format!("expected 19 fields, found {}", tokens.len())));
        }
        let timestamp = tokens[0]
            .parse::<u64>()
            .map_err(|e| err(format!("timestamp: {e}")))?;
        let mut vals = [0.0f64; 18];
        for (slot, tok) in vals.iter_mut().zip(&tokens[1..]) {
            *slot = tok.parse().map_err(|e| err(format!("'{tok}': {e}")))?;
        }
        let m = &vals[6..];
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let pose = if ortho <= ROTATION_TOL {
            CameraPose::new(rotation, translation)
        } else if ortho <= LOOSE_ROTATION_TOL {
            CameraPose::orthonormalized(rotation, translation)
        } else {
            Err(Error::InvalidPose(format!("rotation off SO(3) by {ortho:e}")))
        }
        .map_err(|e| err(e.to_string()))?;
        out.push(PoseRecord {
            timestamp,
            normalized_intrinsics: [vals[0], vals[1], vals[2], vals[3]],
            pose,
        });
    }
    Ok(out)
}

pub fn format_pose_text(records: &[PoseRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

pub fn read_pose_file(path: &Path) -> Result<Vec<PoseRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_text(&text, &path.display().to_string())
}

pub fn write_pose_file(path: &Path, records: &[PoseRecord]) -> Result<()> {
    std::fs::write(path, format_pose_text(records)).map_err(|e| Error::io(path, e))
}
