//! Multi-head attention and the Transformer block wrapped around it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::TensorError;

/// Where the layer norms sit relative to the residual connections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormOrder {
    /// `LN(x + sublayer(x))`, as in the original Transformer.
    #[default]
    Post,
    /// `x + sublayer(LN(x))`
    Pre,
}

impl std::str::FromStr for NormOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post" => Ok(NormOrder::Post),
            "pre" => Ok(NormOrder::Pre),
            other => Err(Error::Config(format!("unknown norm order `{other}` (post|pre)"))),
        }
    }
}

impl std::fmt::Display for NormOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormOrder::Post => "post",
            NormOrder::Pre => "pre",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhaConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub norm: NormOrder,
}

impl MhaConfig {
    pub fn new(d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        let cfg = Self { d_model, heads, d_ff, norm: NormOrder::Post };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 {
            return Err(Error::Config("attention needs d_model ≥ 1 and heads ≥ 1".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.d_ff < self.d_model {
            return Err(Error::Config(format!("d_ff {} must be at least d_model {}", self.d_ff, self.d_model)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnBlockParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl AttnBlockParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &MhaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            wq: Linear::new(store, &format!("{prefix}.q"), d, d, rng)?,
            wk: Linear::new(store, &format!("{prefix}.k"), d, d, rng)?,
            wv: Linear::new(store, &format!("{prefix}.v"), d, d, rng)?,
            wo: Linear::new(store, &format!("{prefix}.o"), d, d, rng)?,
            ff1: Linear::new(store, &format!("{prefix}.ff1"), d, cfg.d_ff, rng)?,
            ff2: Linear::new(store, &format!("{prefix}.ff2"), cfg.d_ff, d, rng)?,
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), d)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d)?,
        })
    }
}

fn check_width(g: &Graph<'_>, v: Var, cfg: &MhaConfig) -> Result<()> {
    let shape = g.shape(v);
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(TensorError::Dimension {
            op: "mha",
            lhs: shape.to_vec(),
            rhs: vec![shape.first().copied().unwrap_or(0), cfg.d_model],
        }
        .into());
    }
    Ok(())
}

/// Multi-head attention output together with the per-head weight matrices
/// (`Lq × Lk` each).
pub fn mha_with_weights(
    g: &mut Graph<'_>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &AttnBlockParams,
    cfg: &MhaConfig,
) -> Result<(Var, Vec<Var>)> {
    for v in [q_in, k_in, v_in] {
        check_width(g, v, cfg)?;
    }
    if g.shape(k_in)[0] != g.shape(v_in)[0] {
        return Err(TensorError::Dimension {
            op: "mha keys/values",
            lhs: g.shape(k_in).to_vec(),
            rhs: g.shape(v_in).to_vec(),
        }
        .into());
    }
    let q = p.wq.forward(g, q_in)?;
    let k = p.wk.forward(g, k_in)?;
    let v = p.wv.forward(g, v_in)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh)?,
                g.slice_cols(k, h * dh, (h + 1) * dh)?,
                g.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax(scores);
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok((p.wo.forward(g, cat)?, weights))
}

pub fn mha(g: &mut Graph<'_>, q_in: Var, k_in: Var, v_in: Var, p: &AttnBlockParams, cfg: &MhaConfig) -> Result<Var> {
    Ok(mha_with_weights(g, q_in, k_in, v_in, p, cfg)?.0)
}

/// Attention + feed-forward with residuals and layer norms. Output has the
/// shape of `q_src`.
pub fn attn_block(g: &mut Graph<'_>, q_src: Var, kv_src: Var, p: &AttnBlockParams, cfg: &MhaConfig) -> Result<Var> {
    match cfg.norm {
        NormOrder::Post => {
            let a = mha(g, q_src, kv_src, kv_src, p, cfg)?;
            let x = g.add(q_src, a)?;
            let x = p.ln1.forward(g, x)?;
            let f = feed_forward(g, x, p)?;
            let y = g.add(x, f)?;
            Ok(p.ln2.forward(g, y)?)
        }
        NormOrder::Pre => {
            let qn = p.ln1.forward(g, q_src)?;
            let kvn = if kv_src == q_src { qn } else { p.ln1.forward(g, kv_src)? };
            let a = mha(g, qn, kvn, kvn, p, cfg)?;
            let x = g.add(q_src, a)?;
            let xn = p.ln2.forward(g, x)?;
            let f = feed_forward(g, xn, p)?;
            Ok(g.add(x, f)?)
        }
    }
}

fn feed_forward(g: &mut Graph<'_>, x: Var, p: &AttnBlockParams) -> Result<Var> {
    let h = p.ff1.forward(g, x)?;
    let h = g.gelu(h);
    Ok(p.ff2.forward(g, h)?)
}
