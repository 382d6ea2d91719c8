use nalgebra::Vector3;
use rayon::prelude::*;

use super::scene::{Scene, PALETTE, ROOM_MAX, ROOM_MIN};
use crate::geometry::{CameraPose, Intrinsics};
use crate::image::Image;

pub const BACKGROUND: [f64; 3] = [0.05, 0.05, 0.08];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter of the hit, `origin + t * dir`.
    pub t: f64,
    pub color: [f64; 3],
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Slab test; returns entry and exit parameters and the entry axis.
fn slab(o: &Vector3<f64>, d: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<(f64, f64, usize, usize)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut a0, mut a1) = (0, 0);
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < min[i] || o[i] > max[i] {
                return None;
            }
            continue;
        }
        let (mut n, mut f) = ((min[i] - o[i]) / d[i], (max[i] - o[i]) / d[i]);
        if n > f {
            std::mem::swap(&mut n, &mut f);
        }
        if n > t0 {
            t0 = n;
            a0 = i;
        }
        if f < t1 {
            t1 = f;
            a1 = i;
        }
    }
    (t0 <= t1).then_some((t0, t1, a0, a1))
}

/// Nearest surface along a world-space ray with `t > 0`.
pub fn raycast(scene: &Scene, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut take = |t: f64, color: [f64; 3]| {
        if t > 1e-9 && best.is_none_or(|b| t < b.t) {
            best = Some(Hit { t, color });
        }
    };
    // Room walls, seen from inside.
    let (rmin, rmax) = (Vector3::from(ROOM_MIN), Vector3::from(ROOM_MAX));
    if let Some((_, t1, _, axis)) = slab(o, d, &rmin, &rmax) {
        let p = o + d * t1;
        let inside = (0..3).all(|i| o[i] >= rmin[i] && o[i] <= rmax[i]);
        if inside {
            let wall = 2 * axis + usize::from(d[axis] > 0.0);
            let (u, v) = match axis {
                0 => (p.y, p.z),
                1 => (p.x, p.z),
                _ => (p.x, p.y),
            };
            let cell = ((u / scene.checker).floor() + (v / scene.checker).floor()) as i64;
            let k = if cell.rem_euclid(2) == 0 { 1.0 } else { 0.65 };
            take(t1, shade(PALETTE[scene.walls[wall]].1, k));
        }
    }
    for b in &scene.boxes {
        if let Some((t0, _, axis, _)) = slab(o, d, &b.min, &b.max) {
            // Face shading by axis keeps box edges visible.
            let k = [0.8, 1.0, 0.9][axis];
            take(t0, shade(PALETTE[b.color].1, k));
        }
    }
    for s in &scene.splats {
        let oc = o - s.center;
        let (a, h, c) = (d.norm_squared(), oc.dot(d), oc.norm_squared() - s.radius * s.radius);
        let disc = h * h - a * c;
        if disc >= 0.0 {
            take((-h - disc.sqrt()) / a, s.color);
        }
    }
    best
}

/// Renders an `h x w` view, averaging a 2x2 grid of rays around each pixel
/// coordinate.
pub fn render_view(scene: &Scene, pose: &CameraPose, k: &Intrinsics, h: usize, w: usize) -> Image {
    let rt = pose.rotation.transpose();
    let origin = pose.center();
    let mut data = vec![0.0; h * w * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(v, row)| {
        for u in 0..w {
            let mut acc = [0.0; 3];
            for (du, dv) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let cam = Vector3::new(
                    (u as f64 + du - k.cx) / k.fx,
                    (v as f64 + dv - k.cy) / k.fy,
                    1.0,
                );
                let d = rt * cam;
                let c = raycast(scene, &origin, &d).map(|h| h.color).unwrap_or(BACKGROUND);
                for i in 0..3 {
                    acc[i] += c[i] / 4.0;
                }
            }
            row[u * 3..u * 3 + 3].copy_from_slice(&acc);
        }
    });
    Image {
        width: w,
        height: h,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{epipolar_line, fundamental_matrix, point_line_distance, relative_pose};
    use crate::harness::scene::generate_scene;
    use std::f64::consts::PI;

    fn k() -> Intrinsics {
        Intrinsics::from_fov(60f64.to_radians(), 32, 32).unwrap()
    }

    #[test]
    fn facing_away_from_the_room_shows_background() {
        let scene = generate_scene(1);
        let pose = CameraPose::from_center(*nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), PI).matrix(), Vector3::new(0.0, 0.0, -20.0)).unwrap();
        let img = render_view(&scene, &pose, &k(), 32, 32);
        assert!(img.data.chunks(3).all(|p| p == BACKGROUND));
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = generate_scene(2);
        let pose = CameraPose::identity();
        assert_eq!(render_view(&scene, &pose, &k(), 24, 32), render_view(&scene, &pose, &k(), 24, 32));
    }

    #[test]
    fn dolly_in_enlarges_objects() {
        let scene = Scene {
            boxes: vec![super::super::scene::SceneBox {
                min: Vector3::new(-0.5, -0.5, 2.5),
                max: Vector3::new(0.5, 0.5, 3.0),
                color: 0,
            }],
            splats: vec![],
            walls: [6; 6],
            ..generate_scene(0)
        };
        let area = |z: f64| {
            let pose = CameraPose::from_center(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, z)).unwrap();
            let img = render_view(&scene, &pose, &k(), 32, 32);
            img.data.chunks(3).filter(|p| p[1] < 0.3).count()
        };
        let (far, near) = (area(-1.0), area(0.5));
        assert!(far > 0);
        assert!(near >= far);
    }

    #[test]
    fn rendered_points_land_on_epipolar_lines() {
        let scene = generate_scene(5);
        let k = k();
        let a = CameraPose::from_center(nalgebra::Matrix3::identity(), Vector3::new(0.2, 0.0, 0.0)).unwrap();
        let rb = *nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), 0.2).matrix();
        let b = CameraPose::from_center(rb, Vector3::new(-0.5, 0.1, 0.3)).unwrap();
        let f = fundamental_matrix(&a, &k, &b, &k);
        let rel = relative_pose(&a, &b);
        let mut checked = 0;
        for (u, v) in [(3.0, 4.0), (16.0, 16.0), (28.0, 9.0), (10.0, 25.0)] {
            let d = a.rotation.transpose() * Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            let hit = raycast(&scene, &a.center(), &d).unwrap();
            let p_world = a.center() + d * hit.t;
            let p_b = b.transform_point(&p_world);
            if p_b.z <= 0.0 {
                continue;
            }
            let (ub, vb) = (k.fx * p_b.x / p_b.z + k.cx, k.fy * p_b.y / p_b.z + k.cy);
            let line = epipolar_line(&f, (u, v));
            assert!(point_line_distance(&line, (ub, vb)).unwrap() < 1.0);
            assert!((rel.transform_point(&a.transform_point(&p_world)) - p_b).norm() < 1e-9);
            checked += 1;
        }
        assert!(checked >= 3);
    }
}
