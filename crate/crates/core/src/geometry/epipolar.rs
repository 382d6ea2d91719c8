use nalgebra::{Matrix3, Vector3};

use super::{relative_pose, CameraPose, Intrinsics};
use crate::error::{Error, Result};

/// Lines with `A^2 + B^2` at or below this are treated as degenerate.
pub const DEGENERATE_LINE_EPS: f64 = 1e-18;

/// Relative translations shorter than this make the two-view geometry a
/// pure rotation, for which no epipolar constraint exists.
pub const PURE_ROTATION_EPS: f64 = 1e-6;

/// Cross-product matrix: `skew(a) * b == a x b`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Fundamental matrix from view `a` to view `b`, `x_b^T F x_a = 0`, built as
/// `K_b^-T [t_rel]x R_rel K_a^-1`.
pub fn fundamental_matrix(
    a: &CameraPose,
    k_a: &Intrinsics,
    b: &CameraPose,
    k_b: &Intrinsics,
) -> Matrix3<f64> {
    let rel = relative_pose(a, b);
    let essential = skew(&rel.translation) * rel.rotation;
    k_b.inverse_matrix().transpose() * essential * k_a.inverse_matrix()
}

/// Line `A u' + B v' + C = 0` in the second view's pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub degenerate: bool,
}

impl EpipolarLine {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self {
            a,
            b,
            c,
            degenerate: a * a + b * b <= DEGENERATE_LINE_EPS,
        }
    }
}

pub fn epipolar_line(f: &Matrix3<f64>, pixel: (f64, f64)) -> EpipolarLine {
    let l = f * Vector3::new(pixel.0, pixel.1, 1.0);
    EpipolarLine::new(l.x, l.y, l.z)
}

/// Unsigned distance from `pixel` to `line`.
pub fn point_line_distance(line: &EpipolarLine, pixel: (f64, f64)) -> Result<f64> {
    if line.degenerate {
        return Err(Error::DegenerateLine);
    }
    Ok(line_distance_unchecked(line, pixel))
}

#[inline]
pub(crate) fn line_distance_unchecked(line: &EpipolarLine, pixel: (f64, f64)) -> f64 {
    (line.a * pixel.0 + line.b * pixel.1 + line.c).abs() / (line.a * line.a + line.b * line.b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skew_matches_cross() {
        let a = Vector3::new(0.3, -1.2, 2.0);
        let b = Vector3::new(-0.7, 0.1, 0.4);
        assert!((skew(&a) * b - a.cross(&b)).norm() < 1e-15);
    }

    #[test]
    fn lateral_translation_fundamental() {
        let k = Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 1,
            height: 1,
        };
        let b = CameraPose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let f = fundamental_matrix(&CameraPose::identity(), &k, &b, &k);
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_eq!(f, expected);
        let line = epipolar_line(&f, (5.0, 7.0));
        assert_eq!((line.a, line.b, line.c), (0.0, -1.0, 7.0));
        assert!(!line.degenerate);
    }

    #[test]
    fn pure_rotation_has_null_fundamental() {
        let k = Intrinsics::from_fov(1.2, 16, 16).unwrap();
        let a = CameraPose::from_axis_angle(Vector3::y(), 0.2, Vector3::new(0.5, 0.0, 0.0));
        let spin = CameraPose::from_axis_angle(Vector3::x(), 0.3, Vector3::zeros());
        let b = spin.compose(&a);
        assert!(fundamental_matrix(&a, &k, &b, &k).norm() < 1e-12);
    }

    #[test]
    fn distances() {
        assert_eq!(point_line_distance(&EpipolarLine::new(1.0, 0.0, 0.0), (3.0, 4.0)).unwrap(), 3.0);
        let d = point_line_distance(&EpipolarLine::new(3.0, 4.0, 0.0), (1.0, 1.0)).unwrap();
        assert!((d - 1.4).abs() < 1e-15);
        assert_eq!(point_line_distance(&EpipolarLine::new(1.0, 1.0, -2.0), (1.0, 1.0)).unwrap(), 0.0);
        // Negative side of the line gets the same distance.
        assert_eq!(point_line_distance(&EpipolarLine::new(1.0, 0.0, 0.0), (-3.0, 4.0)).unwrap(), 3.0);
    }

    #[test]
    fn zero_matrix_gives_degenerate_line() {
        let line = epipolar_line(&Matrix3::zeros(), (1.0, 2.0));
        assert!(line.degenerate);
        assert!(matches!(point_line_distance(&line, (0.0, 0.0)), Err(Error::DegenerateLine)));
    }
}
