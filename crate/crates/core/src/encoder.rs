//! Patch-token image encoder and the weather-caption text stub.

use rand::Rng;

use crate::attention::{attn_block, AttnBlockParams, MhaConfig, NormOrder};
use crate::data::image::Image;
use crate::data::weather::WeatherCondition;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{ClassifierHead, L2_EPS};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub norm: NormOrder,
    /// One encoder instance for drone, satellite and roadmap views.
    pub shared: bool,
    /// Zero-mean, unit-variance patches per image before projection.
    pub standardize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            patch_size: 16,
            d_model: 64,
            depth: 2,
            heads: 4,
            ff_mult: 4,
            norm: NormOrder::Post,
            shared: true,
            standardize: true,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count N.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn block(&self) -> MhaConfig {
        MhaConfig { d_model: self.d_model, heads: self.heads, d_ff: self.ff_mult * self.d_model, norm: self.norm }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.ff_mult == 0 {
            return Err(Error::Config("encoder feed-forward multiple must be ≥ 1".into()));
        }
        self.block().validate()
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub proj: Linear,
    /// Learned positional embedding, `N × D`.
    pub pos: ParamId,
    pub blocks: Vec<AttnBlockParams>,
    pub config: EncoderConfig,
}

impl ImageEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let proj = Linear::new(store, &format!("{prefix}.patch_proj"), config.patch_dim(), config.d_model, rng)?;
        let pos =
            store.add_uniform(format!("{prefix}.pos"), &[config.tokens(), config.d_model], config.d_model, rng)?;
        let blocks = (0..config.depth)
            .map(|i| AttnBlockParams::new(store, &format!("{prefix}.block{i}"), &config.block(), rng))
            .collect::<Result<_>>()?;
        Ok(Self { proj, pos, blocks, config })
    }
}

/// Non-overlapping patches in raster order, each flattened row-major with
/// interleaved channels: `N × (P·P·3)`.
pub fn patchify(image: &Image, config: &EncoderConfig) -> Result<Tensor> {
    let s = config.image_size;
    if image.width() != s || image.height() != s {
        return Err(Error::Data(format!("image is {}×{}, encoder expects {s}×{s}", image.width(), image.height())));
    }
    let (p, grid) = (config.patch_size, config.grid());
    let mut data = Vec::with_capacity(s * s * 3);
    for gy in 0..grid {
        for gx in 0..grid {
            for y in gy * p..(gy + 1) * p {
                let row = &image.data()[(y * s + gx * p) * 3..(y * s + (gx + 1) * p) * 3];
                data.extend_from_slice(row);
            }
        }
    }
    Ok(Tensor::new(&[config.tokens(), config.patch_dim()], data)?)
}

/// Shifts and scales all values to zero mean and unit variance. The
/// divisor is floored at `1/sqrt(n)`, so a constant input maps to zeros.
pub fn standardize(t: &mut Tensor) {
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = 1.0 / var.sqrt().max(1.0 / n.sqrt());
    for v in t.data_mut() {
        *v = (*v - mean) * scale;
    }
}

/// Linear patch projection plus positional embedding, `N × D`.
pub fn patch_embed(g: &mut Graph<'_>, image: &Image, enc: &ImageEncoder) -> Result<Var> {
    let mut patches = patchify(image, &enc.config)?;
    if enc.config.standardize {
        standardize(&mut patches);
    }
    let patches = g.constant(patches);
    let x = enc.proj.forward(g, patches)?;
    let pos = g.param(enc.pos);
    Ok(g.add(x, pos)?)
}

/// Patch embedding followed by `depth` self-attention blocks.
pub fn encode_tokens(g: &mut Graph<'_>, image: &Image, enc: &ImageEncoder) -> Result<Var> {
    let mut x = patch_embed(g, image, enc)?;
    let cfg = enc.config.block();
    for blk in &enc.blocks {
        x = attn_block(g, x, x, blk, &cfg)?;
    }
    Ok(x)
}

/// Tokens and the unit-norm image feature
/// `l2n(bottleneck(l2n(mean(tokens))))`.
pub fn encode_image(g: &mut Graph<'_>, image: &Image, enc: &ImageEncoder, head: &ClassifierHead) -> Result<(Var, Var)> {
    let tokens = encode_tokens(g, image, enc)?;
    let pooled = g.mean_rows(tokens);
    let h = head.embed(g, pooled)?;
    Ok((tokens, g.l2_normalize(h, L2_EPS)))
}

pub const CAPTION_TEMPLATES: [&str; 3] = [
    "a drone photo taken in {} conditions",
    "an aerial view of buildings and roads, {}",
    "low-altitude capture under {} weather",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeatherCaption {
    pub condition: WeatherCondition,
    pub template: usize,
}

impl WeatherCaption {
    pub fn new(condition: WeatherCondition, template: usize) -> Result<Self> {
        if template >= CAPTION_TEMPLATES.len() {
            return Err(Error::Data(format!(
                "caption template {template} out of range (0..{})",
                CAPTION_TEMPLATES.len()
            )));
        }
        Ok(Self { condition, template })
    }

    /// Row of the embedding table.
    pub fn row(&self) -> usize {
        self.condition.index() * CAPTION_TEMPLATES.len() + self.template
    }

    pub fn text(&self) -> String {
        CAPTION_TEMPLATES[self.template].replace("{}", &self.condition.name().to_lowercase())
    }

    /// Parses text produced by [`WeatherCaption::text`].
    pub fn parse(text: &str) -> Result<Self> {
        for condition in WeatherCondition::ALL {
            for template in 0..CAPTION_TEMPLATES.len() {
                let cap = Self { condition, template };
                if cap.text() == text {
                    return Ok(cap);
                }
            }
        }
        Err(Error::Data(format!("caption `{text}` names no known weather condition")))
    }
}

/// Embedding table over every (condition, template) pair plus an affine map.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoder {
    pub table: ParamId,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut R) -> Result<Self> {
        let rows = WeatherCondition::ALL.len() * CAPTION_TEMPLATES.len();
        let table = store.add_uniform(format!("{prefix}.table"), &[rows, d_model], 1, rng)?;
        let proj = Linear::new(store, &format!("{prefix}.proj"), d_model, d_model, rng)?;
        Ok(Self { table, proj })
    }
}

/// Unit-norm caption embeddings, one row per caption.
pub fn encode_captions(g: &mut Graph<'_>, captions: &[WeatherCaption], enc: &TextEncoder) -> Result<Var> {
    let rows: Vec<usize> = captions.iter().map(WeatherCaption::row).collect();
    let table = g.param(enc.table);
    let e = g.select_rows(table, &rows)?;
    let e = enc.proj.forward(g, e)?;
    Ok(g.l2_normalize(e, L2_EPS))
}

pub fn encode_caption(g: &mut Graph<'_>, caption: WeatherCaption, enc: &TextEncoder) -> Result<Var> {
    encode_captions(g, &[caption], enc)
}
