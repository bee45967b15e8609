//! Rasterisation of a [`SceneSpec`] into aligned satellite, road-map and
//! drone views.
//!
//! The road map depends on the road graph only and has no text path. The
//! drone view re-renders the scene under a per-capture appearance (ground
//! texture, roof and road tints drawn from the view seed) and resamples it
//! through a fixed keystone warp plus seeded rotation/scale/shift jitter.

use rand::Rng;

use super::image::Image;
use super::scene::{rng_for, SceneSpec, BUILDING_PALETTE};

pub const ROADMAP_BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];
pub const ROADMAP_ROAD: [f64; 3] = [0.2, 0.2, 0.2];
const SAT_ROAD: [f64; 3] = [0.42, 0.41, 0.40];
const GROUND: [f64; 3] = [0.36, 0.45, 0.26];
const PALETTE: [[f64; 3]; BUILDING_PALETTE] = [
    [0.70, 0.30, 0.22],
    [0.80, 0.78, 0.70],
    [0.30, 0.38, 0.55],
    [0.75, 0.62, 0.38],
    [0.18, 0.20, 0.22],
    [0.55, 0.68, 0.70],
];
/// Keystone strength of the fixed oblique-view warp.
const KEYSTONE: f64 = 0.25;

/// How strongly a drone capture's appearance departs from the satellite's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// 0 reuses the satellite appearance exactly; 1 is the default
    /// capture-to-capture variation.
    pub appearance_shift: f64,
    /// Maximum in-plane rotation of the drone capture, in degrees.
    pub max_rotation_deg: f64,
    /// Probability that a building in the archived satellite image differs
    /// from the current scene (moved, resized or recoloured).
    pub satellite_staleness: f64,
    /// Fraction of the archived satellite image under cloud.
    pub cloud_cover: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { appearance_shift: 1.0, max_rotation_deg: 12.0, satellite_staleness: 0.5, cloud_cover: 0.35 }
    }
}

#[derive(Debug, Clone)]
pub struct RenderedViews {
    pub satellite: Image,
    pub roadmap: Image,
    pub drone_clean: Image,
}

#[derive(Debug, Clone)]
struct Appearance {
    ground_seed: u64,
    ground_tint: [f64; 3],
    roof_tint: [[f64; 3]; BUILDING_PALETTE],
    road_tint: [f64; 3],
    texture_amp: f64,
}

impl Appearance {
    fn satellite(scene: &SceneSpec) -> Self {
        Self {
            ground_seed: rng_for(&[scene.seed, scene.class_id, 0x6A7]).gen(),
            ground_tint: [0.0; 3],
            roof_tint: [[0.0; 3]; BUILDING_PALETTE],
            road_tint: [0.0; 3],
            texture_amp: 1.0,
        }
    }

    fn capture(scene: &SceneSpec, view_seed: u64, shift: f64) -> Self {
        if shift == 0.0 {
            return Self::satellite(scene);
        }
        let mut rng = rng_for(&[view_seed, 0xA99]);
        let mut tint = |amp: f64| -> [f64; 3] {
            let common = rng.gen_range(-amp..amp);
            [0, 1, 2].map(|_| shift * (common + rng.gen_range(-amp / 2.0..amp / 2.0)))
        };
        let ground_tint = tint(0.10);
        let road_tint = tint(0.08);
        let mut roof_tint = [[0.0; 3]; BUILDING_PALETTE];
        for r in roof_tint.iter_mut() {
            *r = tint(0.12);
        }
        Self {
            ground_seed: rng.gen(),
            ground_tint,
            roof_tint,
            road_tint,
            texture_amp: 1.0 + shift * rng.gen_range(-0.3..0.3),
        }
    }
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (cx * cx + cy * cy).sqrt()
}

fn centre(x: usize, y: usize, size: usize) -> [f64; 2] {
    [(x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64]
}

/// Pixels within half a stroke width of any road segment.
pub fn road_mask(scene: &SceneSpec, size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = centre(x, y, size);
            mask[y * size + x] = scene
                .roads
                .iter()
                .any(|r| r.points.windows(2).any(|w| dist_to_segment(p, w[0], w[1]) <= r.width / 2.0));
        }
    }
    mask
}

/// Smooth value noise in roughly `[-1, 1]`: bilinear blend of a coarse and
/// a fine random lattice.
/// Bilinear value noise on an `n`×`n` lattice of uniform draws in [-1, 1).
fn lattice_field(rng: &mut rand_chacha::ChaCha8Rng, n: usize, size: usize) -> Vec<f64> {
    let grid: Vec<f64> = (0..(n + 1) * (n + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let at = |x: usize, y: usize| grid[y * (n + 1) + x];
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let [u, v] = centre(x, y, size);
            let (gx, gy) = (u * n as f64, v * n as f64);
            let (x0, y0) = ((gx.floor() as usize).min(n - 1), (gy.floor() as usize).min(n - 1));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn value_noise(seed: u64, size: usize) -> Vec<f64> {
    let mut rng = rng_for(&[seed, 0x401]);
    let coarse = lattice_field(&mut rng, 5, size);
    let fine = lattice_field(&mut rng, 16, size);
    coarse.iter().zip(&fine).map(|(c, f)| 0.65 * c + 0.35 * f).collect()
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn render_with(scene: &SceneSpec, size: usize, look: &Appearance) -> Image {
    let roads = road_mask(scene, size);
    let noise = value_noise(look.ground_seed, size);
    let mut img = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let p = centre(x, y, size);
            let rgb = if roads[i] {
                add3(SAT_ROAD, look.road_tint)
            } else if let Some(b) =
                scene.buildings.iter().rev().find(|b| p[0] >= b.x0 && p[0] < b.x1 && p[1] >= b.y0 && p[1] < b.y1)
            {
                add3(PALETTE[b.color], look.roof_tint[b.color])
            } else {
                let n = noise[i] * 0.14 * look.texture_amp;
                add3(add3(GROUND, look.ground_tint), [n, 0.8 * n, 0.6 * n])
            };
            img.set(x, y, rgb);
        }
    }
    img.clip();
    img.quantize();
    img
}

pub fn render_satellite(scene: &SceneSpec, size: usize) -> Image {
    render_with(scene, size, &Appearance::satellite(scene))
}

/// The scene as an older archive capture would show it: some buildings
/// replaced, then a seeded cloud layer. Roads are never changed, only
/// hidden where clouds lie over them. Each `capture` index is an
/// independent archive image of the same place.
pub fn render_archive_satellite(scene: &SceneSpec, size: usize, capture: u64, opts: &RenderOptions) -> Image {
    let mut rng = rng_for(&[scene.seed, scene.class_id, capture, 0xA2C]);
    let mut past = scene.clone();
    for b in past.buildings.iter_mut() {
        if rng.gen::<f64>() < opts.satellite_staleness {
            let w = rng.gen_range(0.08..0.22);
            let h = rng.gen_range(0.08..0.22);
            b.x0 = rng.gen_range(0.0..1.0 - w);
            b.y0 = rng.gen_range(0.0..1.0 - h);
            b.x1 = b.x0 + w;
            b.y1 = b.y0 + h;
            b.color = rng.gen_range(0..BUILDING_PALETTE);
        }
    }
    let mut img = render_with(&past, size, &Appearance::satellite(scene));
    add_clouds(&mut img, rng.gen(), opts.cloud_cover);
    img
}

/// Soft white cloud blobs over about `cover` of the image, seeded.
pub fn add_clouds(img: &mut Image, seed: u64, cover: f64) {
    if cover <= 0.0 {
        return;
    }
    let size = img.width();
    let mut rng = rng_for(&[seed, 0xC10D]);
    let noise = lattice_field(&mut rng, 3, size);
    let mut sorted = noise.clone();
    sorted.sort_by(f64::total_cmp);
    let k = ((1.0 - cover.min(1.0)) * (sorted.len() - 1) as f64).round() as usize;
    let t = sorted[k];
    for (i, n) in noise.iter().enumerate() {
        let a = ((n - t) / 0.25 + 0.5).clamp(0.0, 1.0) * 0.95;
        if a > 0.0 {
            let (x, y) = (i % size, i / size);
            let p = img.get(x, y);
            img.set(x, y, p.map(|v| v * (1.0 - a) + 0.93 * a));
        }
    }
    img.quantize();
}

/// Roads only, dark strokes on white. Buildings never reach this raster.
pub fn render_roadmap(scene: &SceneSpec, size: usize) -> Image {
    let mask = road_mask(scene, size);
    let mut img = Image::filled(size, size, ROADMAP_BACKGROUND);
    for (i, &on) in mask.iter().enumerate() {
        if on {
            img.set(i % size, i / size, ROADMAP_ROAD);
        }
    }
    img
}

pub fn render_drone(scene: &SceneSpec, size: usize, view_seed: u64, opts: &RenderOptions) -> Image {
    let look = Appearance::capture(scene, view_seed, opts.appearance_shift);
    let src = render_with(scene, size, &look);
    let mut rng = rng_for(&[view_seed, 0xD20]);
    let theta = rng.gen_range(-1.0..=1.0) * opts.max_rotation_deg.to_radians();
    let scale = rng.gen_range(0.92..1.08);
    let (tx, ty) = (rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04));
    let (sin, cos) = theta.sin_cos();
    let mut out = Image::filled(size, size, [0.0; 3]);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let [u, v] = centre(x, y, size);
            let (cu, cv) = (u - 0.5, v - 0.5);
            // rows nearer the top of the frame cover a wider ground strip
            let row_scale = 1.0 - KEYSTONE * cv;
            let (wx, wy) = (cu * row_scale, cv * (1.0 - 0.5 * KEYSTONE * cv));
            let rx = scale * (cos * wx - sin * wy) + 0.5 + tx;
            let ry = scale * (sin * wx + cos * wy) + 0.5 + ty;
            out.set(x, y, src.sample_bilinear(rx * s - 0.5, ry * s - 0.5));
        }
    }
    out.quantize();
    out
}

pub fn render_views(scene: &SceneSpec, size: usize, view_seed: u64, opts: &RenderOptions) -> RenderedViews {
    RenderedViews {
        satellite: render_archive_satellite(scene, size, 0, opts),
        roadmap: render_roadmap(scene, size),
        drone_clean: render_drone(scene, size, view_seed, opts),
    }
}

/// Satellite pixels painted with the road colour.
pub fn satellite_road_pixels(sat: &Image) -> Vec<bool> {
    let mut road = Image::filled(1, 1, SAT_ROAD);
    road.quantize();
    let target = road.get(0, 0);
    (0..sat.width() * sat.height()).map(|i| sat.get(i % sat.width(), i / sat.width()) == target).collect()
}

pub fn roadmap_road_pixels(map: &Image) -> Vec<bool> {
    (0..map.width() * map.height()).map(|i| map.get(i % map.width(), i / map.width()) != ROADMAP_BACKGROUND).collect()
}

/// Road-map stand-in derived from the satellite raster alone: Sobel edge
/// magnitude of the luminance, drawn dark on white.
pub fn pseudo_auxiliary(sat: &Image) -> Image {
    let (w, h) = (sat.width(), sat.height());
    let lum = |x: i64, y: i64| {
        let p = sat.get(x.clamp(0, w as i64 - 1) as usize, y.clamp(0, h as i64 - 1) as usize);
        0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    };
    let mut out = Image::filled(w, h, ROADMAP_BACKGROUND);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = lum(x + 1, y - 1) + 2.0 * lum(x + 1, y) + lum(x + 1, y + 1)
                - lum(x - 1, y - 1)
                - 2.0 * lum(x - 1, y)
                - lum(x - 1, y + 1);
            let gy = lum(x - 1, y + 1) + 2.0 * lum(x, y + 1) + lum(x + 1, y + 1)
                - lum(x - 1, y - 1)
                - 2.0 * lum(x, y - 1)
                - lum(x + 1, y - 1);
            let v = 1.0 - (gx.hypot(gy) * 1.5).min(1.0);
            out.set(x as usize, y as usize, [v; 3]);
        }
    }
    out.quantize();
    out
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
