//! The full network: view encoder(s), satellite/roadmap fusion, the shared
//! classifier head, and the drone/text branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::NormOrder;
use crate::data::dataset::View;
use crate::data::image::Image;
use crate::encoder::{encode_tokens, EncoderConfig, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{fuse_pair_raw, FusionConfig, FusionParams, DEFAULT_GATE_INIT};
use crate::graph::{Graph, Var};
use crate::losses::{ClassifierHead, MatchHead, L2_EPS};
use crate::nn::Linear;
use crate::parallel::{self, ExecMode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion_heads: usize,
    /// Heads of the channel block, whose model width is N.
    pub channel_heads: usize,
    pub fusion_ff_mult: usize,
    pub fusion_norm: NormOrder,
    pub gate_init: f64,
    /// Channel-level stage on/off.
    pub channel: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion_heads: 4,
            channel_heads: 4,
            fusion_ff_mult: 4,
            fusion_norm: NormOrder::Pre,
            gate_init: DEFAULT_GATE_INIT,
            channel: true,
        }
    }
}

impl ModelConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            tokens: self.encoder.tokens(),
            d_model: self.encoder.d_model,
            heads: self.fusion_heads,
            channel_heads: self.channel_heads,
            ff_mult: self.fusion_ff_mult,
            norm: self.fusion_norm,
            gate_init: self.gate_init,
            channel: self.channel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion().validate()
    }
}

/// Graph handles for one encoded image.
#[derive(Debug, Clone, Copy)]
pub struct ImageOut {
    pub tokens: Var,
    /// Bottleneck output, the classifier input.
    pub hidden: Var,
    /// Unit-norm retrieval feature.
    pub feature: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PairOut {
    pub satellite: ImageOut,
    pub roadmap_tokens: Var,
    pub hidden: Var,
    pub feature: Var,
}

#[derive(Debug, Clone)]
pub struct GeoFuseModel {
    pub store: ParamStore,
    encoders: Vec<ImageEncoder>,
    pub fusion: FusionParams,
    pub head: ClassifierHead,
    pub text: TextEncoder,
    /// Drone feature projection used only by the image-text terms.
    pub text_proj: Linear,
    pub itm: MatchHead,
    pub classes: Vec<String>,
    pub config: ModelConfig,
}

impl GeoFuseModel {
    pub fn new(config: ModelConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() {
            return Err(Error::Config("model needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc_cfg = config.encoder;
        let encoders = if enc_cfg.shared {
            vec![ImageEncoder::new(&mut store, "encoder", enc_cfg, &mut rng)?]
        } else {
            View::ALL
                .iter()
                .map(|v| ImageEncoder::new(&mut store, &format!("encoder.{v}"), enc_cfg, &mut rng))
                .collect::<Result<_>>()?
        };
        let d = enc_cfg.d_model;
        let fusion = FusionParams::new(&mut store, "fusion", config.fusion(), &mut rng)?;
        let head = ClassifierHead::new(&mut store, "head", d, classes.len(), &mut rng)?;
        let text = TextEncoder::new(&mut store, "text", d, &mut rng)?;
        let text_proj = Linear::new(&mut store, "text_proj", d, d, &mut rng)?;
        let itm = MatchHead::new(&mut store, "itm", d, &mut rng)?;
        Ok(Self { store, encoders, fusion, head, text, text_proj, itm, classes, config })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn encoder(&self, view: View) -> &ImageEncoder {
        if self.encoders.len() == 1 {
            &self.encoders[0]
        } else {
            &self.encoders[View::ALL.iter().position(|v| *v == view).expect("view")]
        }
    }

    fn finish(&self, g: &mut Graph<'_>, tokens: Var, pooled: Var) -> Result<ImageOut> {
        let hidden = self.head.embed(g, pooled)?;
        let feature = g.l2_normalize(hidden, L2_EPS);
        Ok(ImageOut { tokens, hidden, feature })
    }

    pub fn image_forward(&self, g: &mut Graph<'_>, image: &Image, view: View) -> Result<ImageOut> {
        let tokens = encode_tokens(g, image, self.encoder(view))?;
        let pooled = g.mean_rows(tokens);
        self.finish(g, tokens, pooled)
    }

    /// Encodes both rasters and fuses them; the fused feature goes through
    /// the same head as single images.
    pub fn pair_forward(&self, g: &mut Graph<'_>, satellite: &Image, roadmap: &Image) -> Result<PairOut> {
        let sat = self.image_forward(g, satellite, View::Satellite)?;
        let fr = encode_tokens(g, roadmap, self.encoder(View::Roadmap))?;
        let fused = fuse_pair_raw(g, sat.tokens, fr, &self.fusion)?;
        let out = self.finish(g, sat.tokens, fused)?;
        Ok(PairOut { satellite: sat, roadmap_tokens: fr, hidden: out.hidden, feature: out.feature })
    }

    /// Unit-norm drone-side embedding for the image-text terms.
    pub fn text_side(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        let p = self.text_proj.forward(g, hidden)?;
        Ok(g.l2_normalize(p, L2_EPS))
    }

    pub fn drone_feature(&self, image: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let out = self.image_forward(&mut g, image, View::Drone)?;
        Ok(g.value(out.feature).data().to_vec())
    }

    /// `(satellite feature, fused feature)`.
    pub fn pair_features(&self, satellite: &Image, roadmap: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::with_params(&self.store);
        let out = self.pair_forward(&mut g, satellite, roadmap)?;
        Ok((g.value(out.satellite.feature).data().to_vec(), g.value(out.feature).data().to_vec()))
    }

    pub fn drone_features(&self, images: &[&Image], mode: ExecMode) -> Result<Tensor> {
        let rows = parallel::map(mode, images, |img| self.drone_feature(img));
        stack(rows, self.config.encoder.d_model)
    }

    /// Row-stacked `(satellite, fused)` features of aligned pairs.
    pub fn pair_feature_matrices(
        &self,
        satellites: &[Image],
        roadmaps: &[Image],
        mode: ExecMode,
    ) -> Result<(Tensor, Tensor)> {
        if satellites.len() != roadmaps.len() {
            return Err(Error::Data(format!("{} satellite images but {} roadmaps", satellites.len(), roadmaps.len())));
        }
        let rows = parallel::map_range(mode, satellites.len(), |i| self.pair_features(&satellites[i], &roadmaps[i]));
        let mut sat = Vec::with_capacity(rows.len());
        let mut fused = Vec::with_capacity(rows.len());
        for r in rows {
            let (s, f) = r?;
            sat.push(Ok(s));
            fused.push(Ok(f));
        }
        let d = self.config.encoder.d_model;
        Ok((stack(sat, d)?, stack(fused, d)?))
    }
}

fn stack(rows: Vec<Result<Vec<f64>>>, d: usize) -> Result<Tensor> {
    let n = rows.len();
    let mut data = Vec::with_capacity(n * d);
    for r in rows {
        data.extend(r?);
    }
    Ok(Tensor::new(&[n, d], data)?)
}
