//! Satellite/road-map fusion: gated token-level cross attention, gated
//! self-refinement, gated channel-level cross attention over the transposed
//! token matrices, then average pooling over tokens.
//!
//! Every stage is a residual `x + w · block(x, ·)` with a learnable scalar
//! gate `w`, so a zero gate reduces the stage to the identity.

use rand::Rng;

use crate::attention::{attn_block, AttnBlockParams, MhaConfig, NormOrder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_GATE_INIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Token count N; fixed, since it is the channel block's model width.
    pub tokens: usize,
    /// Embedding width D.
    pub d_model: usize,
    pub heads: usize,
    pub channel_heads: usize,
    /// Feed-forward width as a multiple of the block's model width.
    pub ff_mult: usize,
    pub norm: NormOrder,
    pub gate_init: f64,
    /// When false the channel stage is skipped and its gate is pinned to 0.
    pub channel: bool,
}

impl FusionConfig {
    pub fn new(tokens: usize, d_model: usize, heads: usize) -> Self {
        Self {
            tokens,
            d_model,
            heads,
            channel_heads: heads,
            ff_mult: 4,
            norm: NormOrder::Post,
            gate_init: DEFAULT_GATE_INIT,
            channel: true,
        }
    }

    pub fn token_block(&self) -> MhaConfig {
        MhaConfig { d_model: self.d_model, heads: self.heads, d_ff: self.ff_mult * self.d_model, norm: self.norm }
    }

    pub fn channel_block(&self) -> MhaConfig {
        MhaConfig { d_model: self.tokens, heads: self.channel_heads, d_ff: self.ff_mult * self.tokens, norm: self.norm }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.d_model == 0 {
            return Err(Error::Config("fusion needs N ≥ 1 and D ≥ 1".into()));
        }
        if self.ff_mult == 0 {
            return Err(Error::Config("fusion feed-forward multiple must be ≥ 1".into()));
        }
        self.token_block().validate()?;
        self.channel_block()
            .validate()
            .map_err(|e| Error::Config(format!("channel block (width N = {}): {e}", self.tokens)))
    }
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub gate_w1: ParamId,
    pub gate_w2: ParamId,
    pub gate_w3: ParamId,
    pub token_cross: AttnBlockParams,
    pub token_self: AttnBlockParams,
    pub channel_cross: AttnBlockParams,
    pub config: FusionConfig,
}

impl FusionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: FusionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let gate =
            |store: &mut ParamStore, name: &str, v: f64| store.add(format!("{prefix}.{name}"), Tensor::scalar(v));
        let gate_w1 = gate(store, "gate_w1", config.gate_init)?;
        let gate_w2 = gate(store, "gate_w2", config.gate_init)?;
        let w3_init = if config.channel { config.gate_init } else { 0.0 };
        let gate_w3 = gate(store, "gate_w3", w3_init)?;
        let tb = config.token_block();
        let token_cross = AttnBlockParams::new(store, &format!("{prefix}.token_cross"), &tb, rng)?;
        let token_self = AttnBlockParams::new(store, &format!("{prefix}.token_self"), &tb, rng)?;
        let channel_cross =
            AttnBlockParams::new(store, &format!("{prefix}.channel_cross"), &config.channel_block(), rng)?;
        if !config.channel {
            store.set_trainable(gate_w3, false);
        }
        Ok(Self { gate_w1, gate_w2, gate_w3, token_cross, token_self, channel_cross, config })
    }

    pub fn gates(&self) -> [ParamId; 3] {
        [self.gate_w1, self.gate_w2, self.gate_w3]
    }

    /// Sets all three gates (used for ablations and identity checks).
    pub fn set_gates(&self, store: &mut ParamStore, w: [f64; 3]) {
        for (id, v) in self.gates().into_iter().zip(w) {
            *store.value_mut(id) = Tensor::scalar(v);
        }
    }
}

fn check_pair(g: &Graph<'_>, fs: Var, fr: Var, cfg: &FusionConfig) -> Result<()> {
    let (a, b) = (g.shape(fs), g.shape(fr));
    if a != b || a != [cfg.tokens, cfg.d_model] {
        return Err(TensorError::Dimension { op: "fusion inputs", lhs: a.to_vec(), rhs: b.to_vec() }.into());
    }
    Ok(())
}

fn gated(g: &mut Graph<'_>, base: Var, update: Var, gate: ParamId) -> Result<Var> {
    let w = g.param(gate);
    let scaled = g.scale_by(update, w)?;
    Ok(g.add(base, scaled)?)
}

/// `F'_s = F_s + w1 · block(F_s, F_r)`
pub fn token_cross_fuse(g: &mut Graph<'_>, fs: Var, fr: Var, p: &FusionParams) -> Result<Var> {
    check_pair(g, fs, fr, &p.config)?;
    let upd = attn_block(g, fs, fr, &p.token_cross, &p.config.token_block())?;
    gated(g, fs, upd, p.gate_w1)
}

/// `F''_s = F'_s + w2 · block(F'_s, F'_s)`
pub fn token_self_refine(g: &mut Graph<'_>, fs1: Var, p: &FusionParams) -> Result<Var> {
    let upd = attn_block(g, fs1, fs1, &p.token_self, &p.config.token_block())?;
    gated(g, fs1, upd, p.gate_w2)
}

/// `F_rs = F''_sᵀ + w3 · block(F''_sᵀ, F_rᵀ)`, shape `D × N`: channels are
/// the sequence axis and the block's model width is N.
pub fn channel_cross_fuse(g: &mut Graph<'_>, fs2: Var, fr: Var, p: &FusionParams) -> Result<Var> {
    check_pair(g, fs2, fr, &p.config)?;
    let st = g.transpose(fs2);
    if !p.config.channel {
        return Ok(st);
    }
    let rt = g.transpose(fr);
    let upd = attn_block(g, st, rt, &p.channel_cross, &p.config.channel_block())?;
    gated(g, st, upd, p.gate_w3)
}

/// Mean over the token axis of a `D × N` matrix, returned as `[1, D]`.
pub fn pool_fused(g: &mut Graph<'_>, frs: Var) -> Var {
    let t = g.transpose(frs);
    g.mean_rows(t)
}

/// The whole fusion chain before normalisation, `[1, D]`.
pub fn fuse_pair_raw(g: &mut Graph<'_>, fs: Var, fr: Var, p: &FusionParams) -> Result<Var> {
    let fs1 = token_cross_fuse(g, fs, fr, p)?;
    let fs2 = token_self_refine(g, fs1, p)?;
    let frs = channel_cross_fuse(g, fs2, fr, p)?;
    Ok(pool_fused(g, frs))
}

/// L2-normalised fused embedding, `[1, D]`.
pub fn fuse_pair(g: &mut Graph<'_>, fs: Var, fr: Var, p: &FusionParams) -> Result<Var> {
    let f = fuse_pair_raw(g, fs, fr, p)?;
    Ok(g.l2_normalize(f, crate::losses::L2_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP};
    use crate::parallel::ExecMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(n: usize, d: usize, h: usize, seed: u64) -> (ParamStore, FusionParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cfg = FusionConfig::new(n, d, h);
        cfg.channel_heads = if n.is_multiple_of(h) { h } else { 1 };
        let p = FusionParams::new(&mut store, "fusion", cfg, &mut rng).unwrap();
        (store, p, rng)
    }

    #[test]
    fn zero_gates_are_identities() {
        let (mut store, p, mut rng) = setup(4, 8, 2, 1);
        p.set_gates(&mut store, [0.0; 3]);
        let fst = random(&mut rng, 4, 8);
        let frt = random(&mut rng, 4, 8);
        let mut g = Graph::with_params(&store);
        let fs = g.constant(fst.clone());
        let fr = g.constant(frt);
        let a = token_cross_fuse(&mut g, fs, fr, &p).unwrap();
        assert_eq!(g.value(a), &fst);
        let b = token_self_refine(&mut g, a, &p).unwrap();
        assert_eq!(g.value(b), &fst);
        let c = channel_cross_fuse(&mut g, b, fr, &p).unwrap();
        assert_eq!(g.value(c), &fst.transpose());
    }

    #[test]
    fn single_token_self_refine() {
        let (store, p, mut rng) = setup(1, 4, 2, 2);
        let x = random(&mut rng, 1, 4);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x);
        let y = token_self_refine(&mut g, xv, &p).unwrap();
        let blk = attn_block(&mut g, xv, xv, &p.token_self, &p.config.token_block()).unwrap();
        let w2 = store.value(p.gate_w2).item();
        for ((yo, xo), bo) in g.value(y).data().iter().zip(g.value(xv).data()).zip(g.value(blk).data()) {
            assert!((yo - (xo + w2 * bo)).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_output_is_d_by_n() {
        let (store, p, mut rng) = setup(6, 8, 2, 3);
        let mut g = Graph::with_params(&store);
        let fs = g.constant(random(&mut rng, 6, 8));
        let fr = g.constant(random(&mut rng, 6, 8));
        let y = channel_cross_fuse(&mut g, fs, fr, &p).unwrap();
        assert_eq!(g.shape(y), &[8, 6]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (store, p, mut rng) = setup(4, 8, 2, 4);
        let mut g = Graph::with_params(&store);
        let fs = g.constant(random(&mut rng, 4, 8));
        let fr = g.constant(random(&mut rng, 3, 8));
        assert!(token_cross_fuse(&mut g, fs, fr, &p).is_err());
    }

    #[test]
    fn pool_examples() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 6.0]]).unwrap());
        let f = pool_fused(&mut g, m);
        assert_eq!(g.value(f).data(), &[2.0, 4.0]);
        let col = g.constant(Tensor::new(&[3, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let f = pool_fused(&mut g, col);
        assert_eq!(g.value(f).data(), &[0.5, -1.0, 2.0]);
        let c = g.constant(Tensor::full(&[3, 5], 0.7));
        let f = pool_fused(&mut g, c);
        assert!(g.value(f).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn channel_permutation_invariance() {
        let (store, p, mut rng) = setup(4, 8, 2, 5);
        let fst = random(&mut rng, 4, 8);
        let frt = random(&mut rng, 4, 8);
        // permuting channels of F_r (its columns) permutes the rows of F_rᵀ
        let perm = [5, 2, 7, 0, 1, 6, 3, 4];
        let mut permuted = frt.clone();
        for n in 0..4 {
            for (j, &src) in perm.iter().enumerate() {
                permuted.data_mut()[n * 8 + j] = frt.data()[n * 8 + src];
            }
        }
        let mut g = Graph::with_params(&store);
        let fs = g.constant(fst);
        let fr = g.constant(frt);
        let frp = g.constant(permuted);
        let a = channel_cross_fuse(&mut g, fs, fr, &p).unwrap();
        let b = channel_cross_fuse(&mut g, fs, frp, &p).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) <= 1e-10);
    }

    #[test]
    fn gradient_wrt_gate_w1() {
        let (store, p, mut rng) = setup(3, 4, 2, 6);
        let fst = random(&mut rng, 3, 4);
        let frt = random(&mut rng, 3, 4);
        let r = random(&mut rng, 3, 4);
        let rep = check_gradients(&store, Some(&[p.gate_w1]), DEFAULT_STEP, ExecMode::Sequential, |g| {
            let fs = g.constant(fst.clone());
            let fr = g.constant(frt.clone());
            let rv = g.constant(r.clone());
            let y = token_cross_fuse(g, fs, fr, &p)?;
            let y = g.mul(y, rv)?;
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn self_refine_gradcheck() {
        let (store, p, mut rng) = setup(3, 4, 2, 7);
        let x = random(&mut rng, 3, 4);
        let r = random(&mut rng, 3, 4);
        let rep = check_gradients(&store, None, DEFAULT_STEP, ExecMode::Parallel, |g| {
            let xv = g.constant(x.clone());
            let rv = g.constant(r.clone());
            let y = token_self_refine(g, xv, &p)?;
            let y = g.mul(y, rv)?;
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn disabled_channel_stage_freezes_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let mut cfg = FusionConfig::new(4, 8, 2);
        cfg.channel = false;
        let p = FusionParams::new(&mut store, "f", cfg, &mut rng).unwrap();
        assert_eq!(store.value(p.gate_w3).item(), 0.0);
        assert!(!store.get(p.gate_w3).trainable);
    }

    #[test]
    fn channel_heads_must_divide_tokens() {
        let mut cfg = FusionConfig::new(6, 8, 2);
        cfg.channel_heads = 4;
        assert!(cfg.validate().is_err());
    }
}
