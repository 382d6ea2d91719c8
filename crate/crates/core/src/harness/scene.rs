use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Named palette shared by the scene generator and the caption vocabulary.
pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.15, 0.12]),
    ("green", [0.15, 0.7, 0.2]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.92, 0.85, 0.15]),
    ("purple", [0.55, 0.2, 0.7]),
    ("orange", [0.95, 0.55, 0.1]),
    ("white", [0.92, 0.92, 0.9]),
    ("teal", [0.1, 0.6, 0.6]),
];

pub const MIN_OBJECTS: usize = 8;

/// Axis-aligned room `[min, max]`; the y axis points down, so the floor is
/// at `max.y`.
pub const ROOM_MIN: [f64; 3] = [-4.0, -2.5, -4.0];
pub const ROOM_MAX: [f64; 3] = [4.0, 1.5, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub color: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub color: [f64; 3],
}

/// Colored boxes and point splats inside a textured room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    /// Palette index of each wall: -x, +x, ceiling, floor, -z, +z.
    pub walls: [usize; 6],
    /// Checker period of the wall texture, in world units.
    pub checker: f64,
    pub boxes: Vec<SceneBox>,
    pub splats: Vec<Splat>,
}

impl Scene {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("scene serializes")
    }

    /// Palette index of the largest box.
    pub fn dominant_box_color(&self) -> usize {
        let vol = |b: &SceneBox| (b.max - b.min).iter().product::<f64>();
        self.boxes
            .iter()
            .max_by(|a, b| vol(a).total_cmp(&vol(b)))
            .map(|b| b.color)
            .unwrap_or(0)
    }
}

pub fn generate_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut walls = [0; 6];
    for w in walls.iter_mut() {
        *w = rng.random_range(0..PALETTE.len());
    }
    let checker = rng.random_range(0.6..1.4);
    let count = rng.random_range(MIN_OBJECTS..=MIN_OBJECTS + 4);
    let boxes = (0..count)
        .map(|_| {
            let size = Vector3::new(rng.random_range(0.4..1.3), rng.random_range(0.4..1.6), rng.random_range(0.4..1.3));
            // Keep boxes off the room centre, where cameras live.
            let (x, z) = loop {
                let x: f64 = rng.random_range(ROOM_MIN[0] + 0.2..ROOM_MAX[0] - 0.2 - size.x);
                let z: f64 = rng.random_range(ROOM_MIN[2] + 0.2..ROOM_MAX[2] - 0.2 - size.z);
                if (x + size.x / 2.0).hypot(z + size.z / 2.0) > 1.8 {
                    break (x, z);
                }
            };
            let floor = ROOM_MAX[1];
            SceneBox {
                min: Vector3::new(x, floor - size.y, z),
                max: Vector3::new(x + size.x, floor, z + size.z),
                color: rng.random_range(0..PALETTE.len()),
            }
        })
        .collect();
    let splats = (0..24)
        .map(|_| {
            let c = PALETTE[rng.random_range(0..PALETTE.len())].1;
            let center = loop {
                let p = Vector3::new(
                    rng.random_range(ROOM_MIN[0] + 0.3..ROOM_MAX[0] - 0.3),
                    rng.random_range(ROOM_MIN[1] + 0.3..ROOM_MAX[1] - 0.3),
                    rng.random_range(ROOM_MIN[2] + 0.3..ROOM_MAX[2] - 0.3),
                );
                if p.x.hypot(p.z) > 1.5 {
                    break p;
                }
            };
            Splat {
                center,
                radius: rng.random_range(0.08..0.2),
                color: c,
            }
        })
        .collect();
    Scene {
        seed,
        walls,
        checker,
        boxes,
        splats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn scenes_are_deterministic_and_distinct() {
        assert_eq!(generate_scene(3).to_bytes(), generate_scene(3).to_bytes());
        let distinct: HashSet<Vec<u8>> = (0..100).map(|s| generate_scene(s).to_bytes()).collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn objects_stay_in_the_room() {
        for seed in 0..50 {
            let s = generate_scene(seed);
            assert!(s.boxes.len() >= MIN_OBJECTS);
            for b in &s.boxes {
                for i in 0..3 {
                    assert!(b.min[i] >= ROOM_MIN[i] && b.max[i] <= ROOM_MAX[i]);
                }
            }
            for p in &s.splats {
                for i in 0..3 {
                    assert!(p.center[i] - p.radius >= ROOM_MIN[i] && p.center[i] + p.radius <= ROOM_MAX[i]);
                }
            }
        }
    }
}
