//! Run configuration as flat `section.key=value` text.
//!
//! Sections are `model.*` (encoder), `fusion.*` and `train.*`. Unknown keys
//! are rejected. [`ExperimentConfig::to_text`] writes every key, so an
//! echoed file reproduces the run exactly.

use std::fmt;
use std::str::FromStr;

use crate::attention::NormOrder;
use crate::error::{Error, Result};
use crate::losses::{DEFAULT_LAMBDA, DEFAULT_TAU};
use crate::model::ModelConfig;

/// What the fusion branch receives in place of the road map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Modality {
    #[default]
    Roadmap,
    /// All-white rasters: the satellite-only control.
    Blank,
    /// An edge map computed from the satellite image itself.
    Pseudo,
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "roadmap" => Ok(Modality::Roadmap),
            "blank" => Ok(Modality::Blank),
            "pseudo" => Ok(Modality::Pseudo),
            _ => Err(Error::Config(format!("unknown modality `{s}` (roadmap|blank|pseudo)"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Roadmap => "roadmap",
            Modality::Blank => "blank",
            Modality::Pseudo => "pseudo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorRefresh {
    /// Computed once from the initial parameters.
    Static,
    /// Recomputed at the start of every epoch.
    #[default]
    Epoch,
}

impl FromStr for AnchorRefresh {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(AnchorRefresh::Static),
            "epoch" => Ok(AnchorRefresh::Epoch),
            _ => Err(Error::Config(format!("unknown anchor refresh `{s}` (static|epoch)"))),
        }
    }
}

impl fmt::Display for AnchorRefresh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorRefresh::Static => "static",
            AnchorRefresh::Epoch => "epoch",
        })
    }
}

/// Named configuration presets for the fusion ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Token fusion only: channel stage off, gate w3 frozen at 0, λ = 0.
    TokenOnly,
    /// Token + channel fusion without the class-level contrastive term.
    NoCc,
    /// Full objective without the image-text terms.
    NoIt,
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token-only" => Ok(Ablation::TokenOnly),
            "no-cc" => Ok(Ablation::NoCc),
            "no-it" => Ok(Ablation::NoIt),
            _ => Err(Error::Config(format!("unknown ablation `{s}` (token-only|no-cc|no-it)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices (0-based) at which the matching factor kicks in.
    pub milestones: Vec<usize>,
    pub factors: Vec<f64>,
    pub lambda: f64,
    pub tau: f64,
    /// Rescales each step's gradient to at most this global norm; 0 disables.
    pub clip_norm: f64,
    /// Adds the drone/text contrastive and matching terms.
    pub image_text: bool,
    pub anchor_refresh: AnchorRefresh,
    pub modality: Modality,
    pub weather_severity: f64,
    /// Synchronized flip/rotation of each training sample's views.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: scaled_milestones(30),
            factors: vec![0.1, 0.1],
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            clip_norm: 0.0,
            image_text: true,
            anchor_refresh: AnchorRefresh::Epoch,
            modality: Modality::Roadmap,
            weather_severity: 0.7,
            augment: true,
            seed: 0,
        }
    }
}

/// Decay points at 4/7 and 6/7 of the run (about 57% and 86%).
pub fn scaled_milestones(epochs: usize) -> Vec<usize> {
    let e = epochs as f64;
    let mut m = vec![(4.0 * e / 7.0).round() as usize, (6.0 * e / 7.0).round() as usize];
    m.dedup();
    m
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be ≥ 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr {} must be finite and ≥ 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be ≥ 0".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("train.milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.len() != self.factors.len() {
            return bad(format!("{} milestones but {} decay factors", self.milestones.len(), self.factors.len()));
        }
        if self.factors.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad(format!("train.factors {:?} must lie in (0, 1]", self.factors));
        }
        if !(self.lambda >= 0.0) {
            return bad("train.lambda must be ≥ 0".into());
        }
        if !(self.tau > 0.0) {
            return bad("train.tau must be > 0".into());
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad("train.clip_norm must be finite and ≥ 0".into());
        }
        if !(0.0..=1.0).contains(&self.weather_severity) {
            return bad("train.weather_severity outside [0, 1]".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones.iter().zip(&self.factors).filter(|(m, _)| **m <= epoch).fold(self.lr, |lr, (_, f)| lr * f)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let e = &mut m.encoder;
        let t = &mut self.train;
        match key {
            "model.image_size" => e.image_size = parse(key, v)?,
            "model.patch_size" => e.patch_size = parse(key, v)?,
            "model.d_model" => e.d_model = parse(key, v)?,
            "model.depth" => e.depth = parse(key, v)?,
            "model.heads" => e.heads = parse(key, v)?,
            "model.ff_mult" => e.ff_mult = parse(key, v)?,
            "model.norm" => e.norm = v.parse::<NormOrder>()?,
            "model.shared" => e.shared = parse_bool(key, v)?,
            "model.standardize" => e.standardize = parse_bool(key, v)?,
            "fusion.heads" => m.fusion_heads = parse(key, v)?,
            "fusion.channel_heads" => m.channel_heads = parse(key, v)?,
            "fusion.ff_mult" => m.fusion_ff_mult = parse(key, v)?,
            "fusion.norm" => m.fusion_norm = v.parse::<NormOrder>()?,
            "fusion.gate_init" => m.gate_init = parse(key, v)?,
            "fusion.channel" => m.channel = parse_bool(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.milestones" => t.milestones = parse_list(key, v)?,
            "train.factors" => t.factors = parse_list(key, v)?,
            "train.lambda" => t.lambda = parse(key, v)?,
            "train.tau" => t.tau = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.image_text" => t.image_text = parse_bool(key, v)?,
            "train.anchor_refresh" => t.anchor_refresh = v.parse()?,
            "train.modality" => t.modality = v.parse()?,
            "train.weather_severity" => t.weather_severity = parse(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` pairs in order. When `train.epochs` is given
    /// without `train.milestones`, the milestones are rescaled to the new
    /// length.
    pub fn apply<'a, I: IntoIterator<Item = (&'a str, &'a str)>>(&mut self, pairs: I) -> Result<()> {
        let (mut epochs_set, mut milestones_set) = (false, false);
        for (k, v) in pairs {
            self.set(k, v)?;
            epochs_set |= k == "train.epochs";
            milestones_set |= k == "train.milestones";
        }
        if epochs_set && !milestones_set {
            self.train.milestones = scaled_milestones(self.train.epochs);
            self.train.factors.resize(self.train.milestones.len(), 0.1);
        }
        Ok(())
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::TokenOnly => {
                self.model.channel = false;
                self.train.lambda = 0.0;
            }
            Ablation::NoCc => self.train.lambda = 0.0,
            Ablation::NoIt => self.train.image_text = false,
        }
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{raw}`", n + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = Self::parse_text(text)?;
        let mut cfg = Self::default();
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let e = &m.encoder;
        let t = &self.train;
        vec![
            ("model.image_size", e.image_size.to_string()),
            ("model.patch_size", e.patch_size.to_string()),
            ("model.d_model", e.d_model.to_string()),
            ("model.depth", e.depth.to_string()),
            ("model.heads", e.heads.to_string()),
            ("model.ff_mult", e.ff_mult.to_string()),
            ("model.norm", e.norm.to_string()),
            ("model.shared", e.shared.to_string()),
            ("model.standardize", e.standardize.to_string()),
            ("fusion.heads", m.fusion_heads.to_string()),
            ("fusion.channel_heads", m.channel_heads.to_string()),
            ("fusion.ff_mult", m.fusion_ff_mult.to_string()),
            ("fusion.norm", m.fusion_norm.to_string()),
            ("fusion.gate_init", m.gate_init.to_string()),
            ("fusion.channel", m.channel.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.milestones", join(&t.milestones)),
            ("train.factors", join(&t.factors)),
            ("train.lambda", t.lambda.to_string()),
            ("train.tau", t.tau.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.image_text", t.image_text.to_string()),
            ("train.anchor_refresh", t.anchor_refresh.to_string()),
            ("train.modality", t.modality.to_string()),
            ("train.weather_severity", t.weather_severity.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.seed", t.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
