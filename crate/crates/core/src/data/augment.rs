//! Synchronized flip/rotation of a satellite and road-map pair, so the two
//! rasters stay geometrically aligned going into fusion.

use rand::Rng;

use super::image::Image;
use super::scene::rng_for;
use crate::error::{Error, Result};

/// Optional horizontal flip followed by a counter-clockwise rotation of
/// `quarter_turns · 90°`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugTransform {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl AugTransform {
    pub const IDENTITY: AugTransform = AugTransform { flip: false, quarter_turns: 0 };

    pub fn sample(seed: u64) -> Self {
        let mut rng = rng_for(&[seed, 0xA06]);
        Self { flip: rng.gen_bool(0.5), quarter_turns: rng.gen_range(0..4) }
    }

    pub fn is_identity(self) -> bool {
        self == Self::IDENTITY
    }

    /// The transform that undoes `self`.
    pub fn inverse(self) -> Self {
        if self.flip {
            // flip∘rot(k) is an involution
            self
        } else {
            Self { flip: false, quarter_turns: (4 - self.quarter_turns) % 4 }
        }
    }

    pub fn apply(self, img: &Image) -> Image {
        let mut out = img.clone();
        if self.flip {
            out = flip_horizontal(&out);
        }
        for _ in 0..self.quarter_turns % 4 {
            out = rotate_ccw(&out);
        }
        out
    }

    /// Applies the inverse transform.
    pub fn undo(self, img: &Image) -> Image {
        self.inverse().apply(img)
    }
}

fn flip_horizontal(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(w - 1 - x, y));
        }
    }
    out
}

fn rotate_ccw(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            // (x, y) -> (y, w - 1 - x)
            out.set(y, w - 1 - x, img.get(x, y));
        }
    }
    out
}

pub fn synchronized_augment(satellite: &Image, roadmap: &Image, seed: u64) -> Result<(Image, Image, AugTransform)> {
    if !satellite.same_size(roadmap) {
        return Err(Error::Data(format!(
            "satellite {}×{} and road map {}×{} differ in size",
            satellite.width(),
            satellite.height(),
            roadmap.width(),
            roadmap.height()
        )));
    }
    let t = AugTransform::sample(seed);
    Ok((t.apply(satellite), t.apply(roadmap), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render::{iou, render_roadmap, render_satellite, roadmap_road_pixels, satellite_road_pixels};
    use crate::data::scene::generate_scene;

    fn pair() -> (Image, Image) {
        let s = generate_scene(4, 2);
        (render_satellite(&s, 24), render_roadmap(&s, 24))
    }

    #[test]
    fn identity_seed_leaves_both_unchanged() {
        let (sat, map) = pair();
        let seed = (0..1000).find(|s| AugTransform::sample(*s).is_identity()).unwrap();
        let (a, b, t) = synchronized_augment(&sat, &map, seed).unwrap();
        assert!(t.is_identity());
        assert_eq!((a, b), (sat, map));
    }

    #[test]
    fn inverse_restores_exactly() {
        let (sat, map) = pair();
        for seed in 0..32 {
            let (a, b, t) = synchronized_augment(&sat, &map, seed).unwrap();
            assert_eq!(t.undo(&a), sat);
            assert_eq!(t.undo(&b), map);
        }
    }

    #[test]
    fn every_transform_is_reachable() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..200 {
            let t = AugTransform::sample(seed);
            seen.insert((t.flip, t.quarter_turns));
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn alignment_survives_augmentation() {
        let (sat, map) = pair();
        let before = iou(&satellite_road_pixels(&sat), &roadmap_road_pixels(&map));
        for seed in 0..16 {
            let (a, b, _) = synchronized_augment(&sat, &map, seed).unwrap();
            let after = iou(&satellite_road_pixels(&a), &roadmap_road_pixels(&b));
            assert_eq!(before, after);
        }
    }

    #[test]
    fn size_mismatch_is_data_error() {
        let (sat, _) = pair();
        let small = Image::filled(8, 8, [1.0; 3]);
        assert!(matches!(synchronized_augment(&sat, &small, 0), Err(Error::Data(_))));
    }
}
