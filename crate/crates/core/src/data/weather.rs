//! The ten drone-view weather conditions as deterministic parametric
//! corruptions.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::image::Image;
use super::scene::rng_for;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeatherCondition {
    Normal,
    Fog,
    Rain,
    Snow,
    FogRain,
    FogSnow,
    RainSnow,
    Dark,
    OverExposed,
    Wind,
}

impl WeatherCondition {
    pub const ALL: [WeatherCondition; 10] = [
        WeatherCondition::Normal,
        WeatherCondition::Fog,
        WeatherCondition::Rain,
        WeatherCondition::Snow,
        WeatherCondition::FogRain,
        WeatherCondition::FogSnow,
        WeatherCondition::RainSnow,
        WeatherCondition::Dark,
        WeatherCondition::OverExposed,
        WeatherCondition::Wind,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            WeatherCondition::Normal => "Normal",
            WeatherCondition::Fog => "Fog",
            WeatherCondition::Rain => "Rain",
            WeatherCondition::Snow => "Snow",
            WeatherCondition::FogRain => "Fog+Rain",
            WeatherCondition::FogSnow => "Fog+Snow",
            WeatherCondition::RainSnow => "Rain+Snow",
            WeatherCondition::Dark => "Dark",
            WeatherCondition::OverExposed => "Over-exp",
            WeatherCondition::Wind => "Wind",
        }
    }
}

impl fmt::Display for WeatherCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeatherCondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "normal" => WeatherCondition::Normal,
            "fog" => WeatherCondition::Fog,
            "rain" => WeatherCondition::Rain,
            "snow" => WeatherCondition::Snow,
            "fograin" => WeatherCondition::FogRain,
            "fogsnow" => WeatherCondition::FogSnow,
            "rainsnow" => WeatherCondition::RainSnow,
            "dark" => WeatherCondition::Dark,
            "overexp" | "overexposed" | "overexposure" => WeatherCondition::OverExposed,
            "wind" => WeatherCondition::Wind,
            _ => return Err(Error::Data(format!("unknown weather condition `{s}`"))),
        })
    }
}

fn fog(img: &mut Image, s: f64) {
    let a = 0.65 * s;
    img.data_mut().iter_mut().for_each(|v| *v = *v * (1.0 - a) + a);
}

fn rain(img: &mut Image, s: f64, seed: u64) {
    let (w, h) = (img.width(), img.height());
    let dim = 1.0 - 0.15 * s;
    img.data_mut().iter_mut().for_each(|v| *v *= dim);
    let count = (s * (w * h) as f64 / 60.0).round() as usize;
    let len = (h / 8).max(2);
    let alpha = 0.35 + 0.35 * s;
    let mut rng = rng_for(&[seed, 0x4A1]);
    for _ in 0..count {
        let x0 = rng.gen_range(0.0..w as f64);
        let y0 = rng.gen_range(0.0..h as f64);
        for k in 0..len {
            let x = x0 + 0.3 * k as f64;
            let y = y0 + k as f64;
            if x < w as f64 && y < h as f64 {
                img.blend(x as usize, y as usize, [0.74, 0.77, 0.82], alpha);
            }
        }
    }
}

fn snow(img: &mut Image, s: f64, seed: u64) {
    let (w, h) = (img.width(), img.height());
    img.data_mut().iter_mut().for_each(|v| *v += (1.0 - *v) * 0.12 * s);
    let count = (s * (w * h) as f64 / 25.0).round() as usize;
    let mut rng = rng_for(&[seed, 0x5A0]);
    for _ in 0..count {
        let cx = rng.gen_range(0..w) as i64;
        let cy = rng.gen_range(0..h) as i64;
        let r: i64 = if rng.gen_bool(0.3) { 1 } else { 0 };
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    img.blend(x as usize, y as usize, [1.0; 3], 0.85);
                }
            }
        }
    }
}

fn dark(img: &mut Image, s: f64) {
    let gain = 1.0 - 0.65 * s;
    let gamma = 1.0 + 1.2 * s;
    img.data_mut().iter_mut().for_each(|v| *v = gain * v.powf(gamma));
}

fn over_exposed(img: &mut Image, s: f64) {
    let gain = 1.0 + 1.5 * s;
    let lift = 0.15 * s;
    img.data_mut().iter_mut().for_each(|v| *v = *v * gain + lift);
}

/// Horizontal box blur; kernel length grows with severity.
fn wind(img: &mut Image, s: f64) {
    let (w, h) = (img.width(), img.height());
    let k = 1 + (s * w as f64 / 6.0).round() as usize;
    if k == 1 {
        return;
    }
    let src = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for t in 0..k {
                let p = src.get((x + t).min(w - 1), y);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
            img.set(x, y, acc.map(|v| v / k as f64));
        }
    }
}

/// Applies `condition` at `severity ∈ [0, 1]`. Severity 0 and `Normal`
/// return the input unchanged; the output keeps the input's size and stays
/// in `[0, 1]`.
pub fn apply_weather(image: &Image, condition: WeatherCondition, severity: f64, seed: u64) -> Result<Image> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Config(format!("weather severity {severity} outside [0, 1]")));
    }
    let mut img = image.clone();
    if severity == 0.0 {
        return Ok(img);
    }
    let s = severity;
    use WeatherCondition::*;
    match condition {
        Normal => {}
        Fog => fog(&mut img, s),
        Rain => rain(&mut img, s, seed),
        Snow => snow(&mut img, s, seed),
        FogRain => {
            fog(&mut img, s);
            rain(&mut img, s, seed);
        }
        FogSnow => {
            fog(&mut img, s);
            snow(&mut img, s, seed);
        }
        RainSnow => {
            rain(&mut img, s, seed);
            snow(&mut img, s, seed ^ 0x5_0000);
        }
        Dark => dark(&mut img, s),
        OverExposed => over_exposed(&mut img, s),
        Wind => wind(&mut img, s),
    }
    img.clip();
    Ok(img)
}
