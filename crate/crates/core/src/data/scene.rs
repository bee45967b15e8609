//! Procedural scene descriptions: a small road graph and building
//! footprints inside the unit square.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64-style mixing of several words into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    /// Polyline vertices in unit-square coordinates.
    pub points: Vec<[f64; 2]>,
    /// Stroke width in unit-square coordinates.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Building {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub color: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub class_id: u64,
    pub roads: Vec<Road>,
    pub buildings: Vec<Building>,
}

impl SceneSpec {
    pub fn segment_count(&self) -> usize {
        self.roads.iter().map(|r| r.points.len().saturating_sub(1)).sum()
    }

    /// True when every vertex and footprint lies inside `[0, 1]²`.
    pub fn within_unit_square(&self) -> bool {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        self.roads.iter().flat_map(|r| r.points.iter()).all(|p| inside(p[0]) && inside(p[1]))
            && self.buildings.iter().all(|b| inside(b.x0) && inside(b.x1) && inside(b.y0) && inside(b.y1))
    }
}

pub const BUILDING_PALETTE: usize = 6;

fn edge_point<R: Rng>(rng: &mut R, edge: usize) -> [f64; 2] {
    let t = rng.gen_range(0.1..0.9);
    match edge {
        0 => [t, 0.0],
        1 => [1.0, t],
        2 => [t, 1.0],
        _ => [0.0, t],
    }
}

/// Deterministic in `(class_id, seed)`.
pub fn generate_scene(class_id: u64, seed: u64) -> SceneSpec {
    let mut rng = rng_for(&[seed, class_id, 0x5CE4E]);
    let n_roads = rng.gen_range(2..=4);
    let mut roads = Vec::with_capacity(n_roads);
    for _ in 0..n_roads {
        let e0 = rng.gen_range(0..4);
        let e1 = (e0 + rng.gen_range(1..4)) % 4;
        let a = edge_point(&mut rng, e0);
        let b = edge_point(&mut rng, e1);
        let bends = rng.gen_range(1..=2);
        let mut points = vec![a];
        for k in 1..=bends {
            let t = k as f64 / (bends + 1) as f64;
            let mid = [
                (a[0] + (b[0] - a[0]) * t + rng.gen_range(-0.18..0.18)).clamp(0.05, 0.95),
                (a[1] + (b[1] - a[1]) * t + rng.gen_range(-0.18..0.18)).clamp(0.05, 0.95),
            ];
            points.push(mid);
        }
        points.push(b);
        roads.push(Road { points, width: rng.gen_range(0.035..0.06) });
    }
    let n_buildings = rng.gen_range(3..=7);
    let buildings = (0..n_buildings)
        .map(|_| {
            let w = rng.gen_range(0.08..0.22);
            let h = rng.gen_range(0.08..0.22);
            let x0 = rng.gen_range(0.0..1.0 - w);
            let y0 = rng.gen_range(0.0..1.0 - h);
            Building { x0, y0, x1: x0 + w, y1: y0 + h, color: rng.gen_range(0..BUILDING_PALETTE) }
        })
        .collect();
    SceneSpec { seed, class_id, roads, buildings }
}
