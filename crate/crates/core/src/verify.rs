//! Finite-difference suite over every differentiable tape operation, the
//! fusion chain, the losses and the full training objective, at N=4 tokens,
//! D=8 channels and 2 heads.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attn_block, mha, AttnBlockParams, MhaConfig, NormOrder};
use crate::config::TrainConfig;
use crate::data::dataset::{synth_split, Split, SynthConfig};
use crate::data::render::RenderOptions;
use crate::data::weather::WeatherCondition;
use crate::encoder::{encode_captions, EncoderConfig, TextEncoder, WeatherCaption};
use crate::error::{Error, Result};
use crate::fusion::{
    channel_cross_fuse, fuse_pair, pool_fused, token_cross_fuse, token_self_refine, FusionConfig, FusionParams,
};
use crate::gradcheck::{check_gradients, GradCheckReport, DEFAULT_STEP};
use crate::graph::{Graph, Var};
use crate::losses::{
    binary_cross_entropy_with_logits, class_contrastive_loss, cross_entropy, image_text_contrastive, image_text_losses,
    instance_ce_loss, positive_mask, similarity_to_anchors, total_loss, ClassifierHead, MatchHead,
};
use crate::model::{GeoFuseModel, ModelConfig};
use crate::parallel::ExecMode;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{batch_loss, build_anchor_set, prepare_batch};

pub const TOKENS: usize = 4;
pub const WIDTH: usize = 8;
pub const HEADS: usize = 2;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    Fusion,
    Losses,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "fusion" => Ok(Self::Fusion),
            "losses" => Ok(Self::Losses),
            _ => Err(Error::Config(format!("unknown gradcheck scope `{s}` (all|fusion|losses)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Ops,
    Fusion,
    Losses,
    Pipeline,
}

impl Group {
    fn in_scope(self, scope: Scope) -> bool {
        match scope {
            Scope::All => true,
            Scope::Fusion => self == Self::Fusion,
            Scope::Losses => self == Self::Losses,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ops => "ops",
            Self::Fusion => "fusion",
            Self::Losses => "losses",
            Self::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub group: Group,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<9} {:<28} max rel err {:.3e} over {} coords ({:.2}s)",
            self.group.name(),
            self.name,
            self.report.max_rel_err,
            self.report.coordinates,
            self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn offenders(&self, tol: f64) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.report.passes(tol)).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Fixed random weighting so a reduction to a scalar still exercises every
/// output coordinate differently.
fn probe(g: &mut Graph<'_>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37);
    let w = rand_tensor(&mut rng, g.shape(v), -1.0, 1.0);
    let w = g.constant(w);
    let m = g.mul(v, w)?;
    Ok(g.sum_all(m))
}

fn trainable(store: &ParamStore) -> Vec<ParamId> {
    store.ids().filter(|&id| store.get(id).trainable).collect()
}

struct Suite {
    results: Vec<CheckResult>,
    scope: Scope,
    mode: ExecMode,
}

impl Suite {
    fn run<F>(&mut self, group: Group, name: &'static str, store: &ParamStore, build: F) -> Result<()>
    where
        F: for<'a> Fn(&mut Graph<'a>) -> Result<Var> + Sync + Send,
    {
        if !group.in_scope(self.scope) {
            return Ok(());
        }
        let t = Instant::now();
        let ids = trainable(store);
        let report = check_gradients(store, Some(&ids), DEFAULT_STEP, self.mode, build)?;
        self.results.push(CheckResult { name, group, report, seconds: t.elapsed().as_secs_f64() });
        Ok(())
    }
}

fn ops(s: &mut Suite) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut st = ParamStore::new();
    let a = st.add("a", rand_tensor(&mut rng, &[TOKENS, WIDTH], -1.0, 1.0))?;
    let b = st.add("b", rand_tensor(&mut rng, &[TOKENS, WIDTH], -1.0, 1.0))?;
    let c = st.add("c", rand_tensor(&mut rng, &[WIDTH, TOKENS], -1.0, 1.0))?;
    let row = st.add("row", rand_tensor(&mut rng, &[WIDTH], -1.0, 1.0))?;
    let k = st.add("k", Tensor::scalar(rng.gen_range(0.5..1.5)))?;
    let pos = st.add("pos", rand_tensor(&mut rng, &[TOKENS, WIDTH], 0.5, 2.0))?;
    let st = &st;

    macro_rules! unary {
        ($name:expr, $x:expr, |$g:ident, $v:ident| $body:expr) => {
            s.run(Group::Ops, $name, st, |$g| {
                let $v = $g.param($x);
                let out = $body;
                probe($g, out, 1)
            })?;
        };
    }
    macro_rules! binary {
        ($name:expr, $x:expr, $y:expr, |$g:ident, $u:ident, $v:ident| $body:expr) => {
            s.run(Group::Ops, $name, st, |$g| {
                let $u = $g.param($x);
                let $v = $g.param($y);
                let out = $body;
                probe($g, out, 2)
            })?;
        };
    }

    binary!("matmul", a, c, |g, x, y| g.matmul(x, y)?);
    binary!("matmul_nt", a, b, |g, x, y| g.matmul_nt(x, y)?);
    binary!("add", a, b, |g, x, y| g.add(x, y)?);
    binary!("sub", a, b, |g, x, y| g.sub(x, y)?);
    binary!("mul", a, b, |g, x, y| g.mul(x, y)?);
    binary!("add_row", a, row, |g, x, y| g.add_row(x, y)?);
    binary!("scale_by", a, k, |g, x, y| g.scale_by(x, y)?);
    binary!("concat_cols", a, b, |g, x, y| g.concat_cols(&[x, y])?);
    binary!("concat_rows", a, b, |g, x, y| g.concat_rows(&[x, y])?);
    unary!("transpose", c, |g, x| g.transpose(x));
    unary!("scale", a, |g, x| g.scale(x, -1.7));
    unary!("exp", a, |g, x| g.exp(x));
    unary!("ln", pos, |g, x| g.ln(x));
    unary!("clamp_min", a, |g, x| g.clamp_min(x, -0.3));
    unary!("gelu", a, |g, x| g.gelu(x));
    unary!("softplus", a, |g, x| g.softplus(x));
    unary!("sum_all", a, |g, x| g.sum_all(x));
    unary!("mean_all", a, |g, x| g.mean_all(x));
    unary!("mean_rows", a, |g, x| g.mean_rows(x));
    unary!("sum_last", a, |g, x| g.sum_last(x));
    unary!("softmax", a, |g, x| g.softmax(x));
    unary!("log_softmax", a, |g, x| g.log_softmax(x));
    unary!("log_sum_exp", a, |g, x| g.log_sum_exp(x, None, -50.0)?);
    let mask: Vec<bool> = (0..TOKENS * WIDTH).map(|i| i % 3 == 0).collect();
    unary!("log_sum_exp_masked", a, |g, x| g.log_sum_exp(x, Some(mask.clone()), -50.0)?);
    unary!("l2_normalize", a, |g, x| g.l2_normalize(x, 1e-12));
    unary!("slice_cols", a, |g, x| g.slice_cols(x, 2, 6)?);
    unary!("select_rows", a, |g, x| g.select_rows(x, &[3, 0, 0, 2])?);
    unary!("reshape", a, |g, x| g.reshape(x, &[WIDTH, TOKENS])?);
    s.run(Group::Ops, "layer_norm", st, |g| {
        let x = g.param(a);
        let gamma = g.param(row);
        let beta = g.param(row);
        let out = g.layer_norm(x, gamma, beta, 1e-5)?;
        probe(g, out, 3)
    })?;
    Ok(())
}

fn fusion_fixture() -> Result<(ParamStore, FusionParams, ParamId, ParamId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut st = ParamStore::new();
    let fs = st.add("fs", rand_tensor(&mut rng, &[TOKENS, WIDTH], -1.0, 1.0))?;
    let fr = st.add("fr", rand_tensor(&mut rng, &[TOKENS, WIDTH], -1.0, 1.0))?;
    let mut cfg = FusionConfig::new(TOKENS, WIDTH, HEADS);
    // non-trivial gates so every block contributes
    cfg.gate_init = 0.6;
    let p = FusionParams::new(&mut st, "fusion", cfg, &mut rng)?;
    Ok((st, p, fs, fr))
}

fn fusion(s: &mut Suite) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for norm in [NormOrder::Post, NormOrder::Pre] {
        let mut st = ParamStore::new();
        let q = st.add("q", rand_tensor(&mut rng, &[TOKENS, WIDTH], -1.0, 1.0))?;
        let kv = st.add("kv", rand_tensor(&mut rng, &[TOKENS + 1, WIDTH], -1.0, 1.0))?;
        let cfg = MhaConfig { norm, ..MhaConfig::new(WIDTH, HEADS, 2 * WIDTH)? };
        let p = AttnBlockParams::new(&mut st, "blk", &cfg, &mut rng)?;
        if norm == NormOrder::Post {
            s.run(Group::Fusion, "mha", &st, |g| {
                let (x, y) = (g.param(q), g.param(kv));
                let out = mha(g, x, y, y, &p, &cfg)?;
                probe(g, out, 4)
            })?;
        }
        let name = if norm == NormOrder::Post { "attn_block_post" } else { "attn_block_pre" };
        s.run(Group::Fusion, name, &st, |g| {
            let (x, y) = (g.param(q), g.param(kv));
            let out = attn_block(g, x, y, &p, &cfg)?;
            probe(g, out, 5)
        })?;
    }

    let (st, p, fs, fr) = fusion_fixture()?;
    s.run(Group::Fusion, "token_cross_fuse", &st, |g| {
        let (a, b) = (g.param(fs), g.param(fr));
        let out = token_cross_fuse(g, a, b, &p)?;
        probe(g, out, 6)
    })?;
    s.run(Group::Fusion, "token_self_refine", &st, |g| {
        let a = g.param(fs);
        let out = token_self_refine(g, a, &p)?;
        probe(g, out, 7)
    })?;
    s.run(Group::Fusion, "channel_cross_fuse", &st, |g| {
        let (a, b) = (g.param(fs), g.param(fr));
        let out = channel_cross_fuse(g, a, b, &p)?;
        probe(g, out, 8)
    })?;
    s.run(Group::Fusion, "pool_fused", &st, |g| {
        let a = g.param(fs);
        let t = g.transpose(a);
        let out = pool_fused(g, t);
        probe(g, out, 9)
    })?;
    s.run(Group::Fusion, "fuse_pair", &st, |g| {
        let (a, b) = (g.param(fs), g.param(fr));
        let out = fuse_pair(g, a, b, &p)?;
        probe(g, out, 10)
    })?;
    Ok(())
}

fn losses(s: &mut Suite) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (b, c) = (4, 3);
    let mut st = ParamStore::new();
    let feat = st.add("feat", rand_tensor(&mut rng, &[b, WIDTH], -1.0, 1.0))?;
    let sat = st.add("sat", rand_tensor(&mut rng, &[b, WIDTH], -1.0, 1.0))?;
    let fused = st.add("fused", rand_tensor(&mut rng, &[b, WIDTH], -1.0, 1.0))?;
    let anchors_s = st.add("anchors_s", rand_tensor(&mut rng, &[c, WIDTH], -1.0, 1.0))?;
    let anchors_f = st.add("anchors_f", rand_tensor(&mut rng, &[c, WIDTH], -1.0, 1.0))?;
    let text_in = st.add("text", rand_tensor(&mut rng, &[b, WIDTH], -1.0, 1.0))?;
    let z = st.add("z", rand_tensor(&mut rng, &[b, 1], -2.0, 2.0))?;
    let head = ClassifierHead::new(&mut st, "head", WIDTH, c, &mut rng)?;
    let itm = MatchHead::new(&mut st, "itm", WIDTH, &mut rng)?;
    let text_enc = TextEncoder::new(&mut st, "textenc", WIDTH, &mut rng)?;
    let labels = [0usize, 2, 2, 1];
    let classes: Vec<usize> = (0..c).collect();
    // row 1 has no positive anchor, exercising the clamp
    let mut mask = positive_mask(&labels, &classes)?;
    mask.mask[c..2 * c].fill(false);
    let (tau, lambda) = (0.5, 0.1);
    let st = &st;

    let unit = |g: &mut Graph<'_>, id: ParamId| {
        let v = g.param(id);
        g.l2_normalize(v, 1e-12)
    };
    s.run(Group::Losses, "class_contrastive", st, |g| {
        let f = unit(g, feat);
        let (sa, fa) = (unit(g, anchors_s), unit(g, anchors_f));
        let sims = similarity_to_anchors(g, f, sa, fa, tau)?;
        Ok(class_contrastive_loss(g, &sims, &mask)?.total)
    })?;
    let full_mask = positive_mask(&labels, &classes)?;
    s.run(Group::Losses, "class_contrastive_all_pos", st, |g| {
        let f = unit(g, feat);
        let (sa, fa) = (unit(g, anchors_s), unit(g, anchors_f));
        let sims = similarity_to_anchors(g, f, sa, fa, tau)?;
        Ok(class_contrastive_loss(g, &sims, &full_mask)?.total)
    })?;
    s.run(Group::Losses, "cross_entropy", st, |g| {
        let f = g.param(feat);
        let l = head.logits(g, f)?;
        cross_entropy(g, l, &labels)
    })?;
    s.run(Group::Losses, "instance_ce", st, |g| {
        let (d, a, f) = (g.param(feat), g.param(sat), g.param(fused));
        instance_ce_loss(g, d, a, f, &labels, &head)
    })?;
    s.run(Group::Losses, "image_text_contrastive", st, |g| {
        let (d, t) = (unit(g, feat), unit(g, text_in));
        Ok(image_text_contrastive(g, d, t, tau)?.expect("batch of four"))
    })?;
    s.run(Group::Losses, "bce_with_logits", st, |g| {
        let v = g.param(z);
        binary_cross_entropy_with_logits(g, v, &[1.0, 0.0, 1.0, 0.0])
    })?;
    let caps = [
        WeatherCaption::new(WeatherCondition::Fog, 0)?,
        WeatherCaption::new(WeatherCondition::Rain, 1)?,
        WeatherCaption::new(WeatherCondition::Fog, 0)?,
        WeatherCaption::new(WeatherCondition::Dark, 2)?,
    ];
    let groups: Vec<usize> = caps.iter().map(WeatherCaption::row).collect();
    s.run(Group::Losses, "image_text_losses", st, |g| {
        let d = unit(g, feat);
        let t = encode_captions(g, &caps, &text_enc)?;
        Ok(image_text_losses(g, d, t, &groups, &itm, tau)?.total)
    })?;
    s.run(Group::Losses, "total_loss", st, |g| {
        let f = unit(g, feat);
        let (sa, fa) = (unit(g, anchors_s), unit(g, anchors_f));
        let sims = similarity_to_anchors(g, f, sa, fa, tau)?;
        let cc = class_contrastive_loss(g, &sims, &full_mask)?.total;
        let (d, a, fu) = (g.param(feat), g.param(sat), g.param(fused));
        let ce = instance_ce_loss(g, d, a, fu, &labels, &head)?;
        let t = encode_captions(g, &caps, &text_enc)?;
        let it = image_text_losses(g, f, t, &groups, &itm, tau)?.total;
        total_loss(g, it, ce, cc, lambda)
    })?;
    Ok(())
}

/// Full objective through encoder, fusion, head and text branch on a
/// three-sample batch; every trainable parameter is perturbed.
fn pipeline(s: &mut Suite) -> Result<()> {
    let synth = SynthConfig {
        classes: 3,
        train_views: 1,
        test_views: 1,
        size: 16,
        seed: 5,
        render: RenderOptions::default(),
        disjoint_test: false,
        train_captures: 1,
    };
    let (split, _) = synth_split(&synth, Split::Train, s.mode)?;
    let mc = ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 8,
            d_model: WIDTH,
            depth: 1,
            heads: HEADS,
            ff_mult: 2,
            ..EncoderConfig::default()
        },
        fusion_heads: HEADS,
        channel_heads: HEADS,
        fusion_ff_mult: 2,
        gate_init: 0.6,
        ..ModelConfig::default()
    };
    let model = GeoFuseModel::new(mc, split.classes.clone(), 3)?;
    let cfg = TrainConfig { batch_size: 3, tau: 0.5, ..TrainConfig::default() };
    let anchors = build_anchor_set(&model, &split, s.mode)?;
    let batch = prepare_batch(&split, &cfg, 0, 0, &[0, 1, 2])?;
    let store = model.store.clone();
    s.run(Group::Pipeline, "geofuse_objective", &store, |g| Ok(batch_loss(g, &model, &batch, &anchors, &cfg)?.total))
}

/// Runs the checks selected by `scope`.
pub fn run_suite(scope: Scope, mode: ExecMode) -> Result<SuiteReport> {
    let t = Instant::now();
    let mut s = Suite { results: Vec::new(), scope, mode };
    ops(&mut s)?;
    fusion(&mut s)?;
    losses(&mut s)?;
    pipeline(&mut s)?;
    Ok(SuiteReport { results: s.results, seconds: t.elapsed().as_secs_f64() })
}
