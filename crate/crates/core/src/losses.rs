//! Training objectives: class-anchor contrastive loss, instance
//! cross-entropy through a shared classifier, the drone/text terms, and
//! their weighted sum.

use std::fmt::Display;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

pub const L2_EPS: f64 = 1e-12;
pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 0.10;
/// Floor applied to both sums inside the class contrastive log-ratio.
pub const CLAMP_MIN: f64 = 1e-8;

/// Per-class reference features, one row per class, L2-normalised when
/// built with normalisation on.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub classes: Vec<String>,
    pub sat: Tensor,
    pub fused: Tensor,
}

impl AnchorSet {
    pub fn new(classes: Vec<String>, sat: Tensor, fused: Tensor) -> Result<Self> {
        let c = classes.len();
        if sat.rows() != c || fused.rows() != c || sat.shape() != fused.shape() {
            return Err(TensorError::Dimension {
                op: "anchor set",
                lhs: sat.shape().to_vec(),
                rhs: fused.shape().to_vec(),
            }
            .into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = classes.iter().find(|c| !seen.insert(*c)) {
            return Err(Error::Data(format!("duplicate anchor class `{dup}`")));
        }
        Ok(Self { classes, sat, fused })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// `B × C` indicator of which anchor class each batch item belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveMask {
    pub rows: usize,
    pub cols: usize,
    pub mask: Vec<bool>,
}

impl PositiveMask {
    pub fn as_tensor(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[self.rows, self.cols], data).expect("mask shape")
    }

    pub fn get(&self, i: usize, c: usize) -> bool {
        self.mask[i * self.cols + c]
    }
}

pub fn positive_mask<L: PartialEq + Display>(batch: &[L], classes: &[L]) -> Result<PositiveMask> {
    let mut mask = Vec::with_capacity(batch.len() * classes.len());
    for y in batch {
        if !classes.contains(y) {
            return Err(Error::Data(format!("label `{y}` is not an anchor class")));
        }
        mask.extend(classes.iter().map(|c| c == y));
    }
    Ok(PositiveMask { rows: batch.len(), cols: classes.len(), mask })
}

/// Drone-to-anchor similarity logits for both anchor modalities.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityMatrices {
    pub sat: Var,
    pub fused: Var,
    pub tau: f64,
}

/// `S[i][c] = f_d^i · anchor_c / τ` for the satellite and fused anchors.
pub fn similarity_to_anchors(
    g: &mut Graph<'_>,
    drone: Var,
    sat_anchors: Var,
    fused_anchors: Var,
    tau: f64,
) -> Result<SimilarityMatrices> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let s = g.matmul_nt(drone, sat_anchors)?;
    let rs = g.matmul_nt(drone, fused_anchors)?;
    Ok(SimilarityMatrices { sat: g.scale(s, 1.0 / tau), fused: g.scale(rs, 1.0 / tau), tau })
}

#[derive(Debug, Clone, Copy)]
pub struct ClassContrastive {
    pub sat: Var,
    pub fused: Var,
    pub total: Var,
}

/// One modality: `-(1/B) Σ_i log(clamp(Σ_c e^{S}M) / clamp(Σ_c e^{S}))`,
/// evaluated in log space as `max(lse, ln floor)` so large logits cannot
/// overflow.
fn contrastive_term(g: &mut Graph<'_>, sims: Var, mask: &PositiveMask) -> Result<Var> {
    let shape = g.shape(sims).to_vec();
    if shape != [mask.rows, mask.cols] {
        return Err(
            TensorError::Dimension { op: "class contrastive", lhs: shape, rhs: vec![mask.rows, mask.cols] }.into()
        );
    }
    let floor = CLAMP_MIN.ln();
    let num = g.log_sum_exp(sims, Some(mask.mask.clone()), floor)?;
    let den = g.log_sum_exp(sims, None, floor)?;
    let ratio = g.sub(num, den)?;
    let s = g.sum_all(ratio);
    Ok(g.scale(s, -1.0 / mask.rows as f64))
}

pub fn class_contrastive_loss(
    g: &mut Graph<'_>,
    sims: &SimilarityMatrices,
    mask: &PositiveMask,
) -> Result<ClassContrastive> {
    let sat = contrastive_term(g, sims.sat, mask)?;
    let fused = contrastive_term(g, sims.fused, mask)?;
    let total = g.add(sat, fused)?;
    Ok(ClassContrastive { sat, fused, total })
}

/// Shared bottleneck + classifier applied to every view.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub bottleneck: Linear,
    pub classifier: Linear,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        Ok(Self {
            bottleneck: Linear::new(store, &format!("{prefix}.bottleneck"), d_model, d_model, rng)?,
            classifier: Linear::new(store, &format!("{prefix}.classifier"), d_model, classes, rng)?,
            classes,
        })
    }

    /// Intermediate feature: bottleneck output of the normalised input.
    pub fn embed(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let xn = g.l2_normalize(x, L2_EPS);
        Ok(self.bottleneck.forward(g, xn)?)
    }

    pub fn logits(&self, g: &mut Graph<'_>, feature: Var) -> Result<Var> {
        Ok(self.classifier.forward(g, feature)?)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.bottleneck.weight, self.bottleneck.bias, self.classifier.weight, self.classifier.bias]
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

/// Mean softmax cross-entropy of `logits` (`B × C`).
pub fn cross_entropy(g: &mut Graph<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    let c = g.value(logits).cols();
    if g.value(logits).rows() != labels.len() {
        return Err(Error::Data(format!("{} labels for {} logit rows", labels.len(), g.value(logits).rows())));
    }
    let oh = one_hot(labels, c)?;
    let oh = g.constant(oh);
    let lsm = g.log_softmax(logits);
    let picked = g.mul(lsm, oh)?;
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0 / labels.len() as f64))
}

/// Cross-entropy of drone, satellite and fused features through the one
/// shared head, summed.
pub fn instance_ce_loss(
    g: &mut Graph<'_>,
    drone: Var,
    sat: Var,
    fused: Var,
    labels: &[usize],
    head: &ClassifierHead,
) -> Result<Var> {
    let mut total = None;
    for f in [drone, sat, fused] {
        let logits = head.logits(g, f)?;
        let ce = cross_entropy(g, logits, labels)?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    Ok(total.expect("three terms"))
}

/// Binary matched/mismatched classifier over `[drone ‖ text]` pairs.
#[derive(Debug, Clone, Copy)]
pub struct MatchHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl MatchHead {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{prefix}.hidden"), 2 * d_model, d_model, rng)?,
            out: Linear::new(store, &format!("{prefix}.out"), d_model, 1, rng)?,
        })
    }

    pub fn logits(&self, g: &mut Graph<'_>, pairs: Var) -> Result<Var> {
        let h = self.hidden.forward(g, pairs)?;
        let h = g.gelu(h);
        Ok(self.out.forward(g, h)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImageTextLosses {
    pub itc: Var,
    pub itm: Var,
    pub total: Var,
    /// False when the batch was too small for the in-batch contrastive term.
    pub itc_defined: bool,
}

/// Symmetric in-batch InfoNCE between matched rows of `drone` and `text`.
/// Returns `None` for batches of one.
pub fn image_text_contrastive(g: &mut Graph<'_>, drone: Var, text: Var, tau: f64) -> Result<Option<Var>> {
    let b = g.value(drone).rows();
    if b < 2 {
        return Ok(None);
    }
    let diag: Vec<usize> = (0..b).collect();
    let s = g.matmul_nt(drone, text)?;
    let s = g.scale(s, 1.0 / tau);
    let i2t = cross_entropy(g, s, &diag)?;
    let st = g.transpose(s);
    let t2i = cross_entropy(g, st, &diag)?;
    let sum = g.add(i2t, t2i)?;
    Ok(Some(g.scale(sum, 0.5)))
}

/// For every drone row `i`, the most similar text row whose caption group
/// differs from `i`'s, if any.
pub fn hardest_negatives(sims: &Tensor, groups: &[usize]) -> Vec<Option<usize>> {
    let b = sims.rows();
    (0..b)
        .map(|i| {
            let row = sims.row(i);
            (0..b).filter(|&j| j != i && groups[j] != groups[i]).fold(None, |best: Option<usize>, j| match best {
                Some(k) if row[k] >= row[j] => Some(k),
                _ => Some(j),
            })
        })
        .collect()
}

/// `L_ITC + L_ITM`. `groups[i]` identifies the caption of text row `i`;
/// rows sharing a caption are never used as each other's negatives.
pub fn image_text_losses(
    g: &mut Graph<'_>,
    drone: Var,
    text: Var,
    groups: &[usize],
    head: &MatchHead,
    tau: f64,
) -> Result<ImageTextLosses> {
    let b = g.value(drone).rows();
    if g.value(text).rows() != b || groups.len() != b {
        return Err(Error::Data(format!(
            "image/text batch mismatch: {b} drone rows, {} text rows, {} groups",
            g.value(text).rows(),
            groups.len()
        )));
    }
    let itc = image_text_contrastive(g, drone, text, tau)?;
    let itc_defined = itc.is_some();
    if !itc_defined {
        log::warn!("image-text contrastive term undefined for batch of {b}; using 0");
    }
    let itc = match itc {
        Some(v) => v,
        None => g.constant(Tensor::scalar(0.0)),
    };

    let sims = Tensor::new(
        &[b, b],
        crate::tensor::matmul_nt(g.value(drone).data(), g.value(text).data(), b, g.value(drone).cols(), b),
    )?;
    let negs = hardest_negatives(&sims, groups);
    let mut drone_idx: Vec<usize> = (0..b).collect();
    let mut text_idx: Vec<usize> = (0..b).collect();
    let mut targets = vec![1.0; b];
    for (i, j) in negs.iter().enumerate() {
        if let Some(j) = j {
            drone_idx.push(i);
            text_idx.push(*j);
            targets.push(0.0);
        }
    }
    let d = g.select_rows(drone, &drone_idx)?;
    let t = g.select_rows(text, &text_idx)?;
    let pairs = g.concat_cols(&[d, t])?;
    let z = head.logits(g, pairs)?;
    let itm = binary_cross_entropy_with_logits(g, z, &targets)?;
    let total = g.add(itc, itm)?;
    Ok(ImageTextLosses { itc, itm, total, itc_defined })
}

/// Mean of `softplus(z) - y z`.
pub fn binary_cross_entropy_with_logits(g: &mut Graph<'_>, logits: Var, targets: &[f64]) -> Result<Var> {
    let n = g.value(logits).len();
    if n != targets.len() {
        return Err(Error::Data(format!("{} targets for {n} logits", targets.len())));
    }
    let y = g.constant(Tensor::new(g.shape(logits), targets.to_vec())?);
    let sp = g.softplus(logits);
    let yz = g.mul(y, logits)?;
    let per = g.sub(sp, yz)?;
    Ok(g.mean_all(per))
}

pub fn total_loss(g: &mut Graph<'_>, it: Var, ce: Var, cc: Var, lambda: f64) -> Result<Var> {
    let cc = g.scale(cc, lambda);
    let a = g.add(it, ce)?;
    Ok(g.add(a, cc)?)
}

pub fn total_loss_value(it: f64, ce: f64, cc: f64, lambda: f64) -> f64 {
    it + ce + lambda * cc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_cc(s: Vec<Vec<f64>>, mask: &PositiveMask) -> (f64, f64, f64) {
        let mut g = Graph::new();
        let t = Tensor::from_rows(&s).unwrap();
        let a = g.constant(t.clone());
        let b = g.constant(t);
        let sims = SimilarityMatrices { sat: a, fused: b, tau: DEFAULT_TAU };
        let l = class_contrastive_loss(&mut g, &sims, mask).unwrap();
        (g.value(l.sat).item(), g.value(l.fused).item(), g.value(l.total).item())
    }

    #[test]
    fn mask_examples() {
        let m = positive_mask(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(m.as_tensor(), Tensor::eye(3));
        let m = positive_mask(&[0, 0, 0], &[0, 1, 2]).unwrap();
        for i in 0..3 {
            assert!(m.get(i, 0) && !m.get(i, 1) && !m.get(i, 2));
        }
        let m = positive_mask(&[0, 2, 1], &[0, 1, 2]).unwrap();
        let expect = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(m.as_tensor(), expect);
        let err = positive_mask(&[7], &[0, 1]).unwrap_err().to_string();
        assert!(err.contains('7'), "{err}");
    }

    #[test]
    fn similarity_examples() {
        let mut g = Graph::new();
        let d = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap());
        let s = similarity_to_anchors(&mut g, d, a, a, 0.07).unwrap();
        let v = g.value(s.sat).data();
        assert!((v[0] - 14.285_714_285_714_286).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
        assert!((v[2] + 1.0 / 0.07).abs() < 1e-12);
        assert!(similarity_to_anchors(&mut g, d, a, a, 0.0).is_err());
    }

    #[test]
    fn single_class_loss_is_zero() {
        let m = positive_mask(&[0, 0], &[0]).unwrap();
        let (s, rs, t) = eval_cc(vec![vec![3.0], vec![-2.0]], &m);
        assert_eq!((s, rs, t), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_class_scalar_case() {
        let m = positive_mask(&[0], &[0, 1]).unwrap();
        let sp = 1.0 / 0.07;
        let (s, _, t) = eval_cc(vec![vec![sp, 0.0]], &m);
        let expect = (1.0 + (-sp).exp()).ln();
        // lse(sp, 0) - sp cancels about 14 ulps of sp
        assert!((s - expect).abs() < 1e-13);
        assert!((s - 6.2e-7).abs() < 1e-8);
        assert!((t - 2.0 * expect).abs() < 1e-13);
    }

    #[test]
    fn empty_positive_row_uses_clamp() {
        let m = PositiveMask { rows: 1, cols: 2, mask: vec![false, false] };
        let (s, _, _) = eval_cc(vec![vec![0.5, -0.25]], &m);
        let den: f64 = 0.5f64.exp() + (-0.25f64).exp();
        let expect = -(1e-8f64 / den).ln();
        assert!(s.is_finite());
        assert!((s - expect).abs() < 1e-10);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 5]));
        let ce = cross_entropy(&mut g, z, &[1, 4]).unwrap();
        assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&mut g, z, &[1, 5]).is_err());
    }

    #[test]
    fn confident_logits_drive_ce_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut g = Graph::new();
            let z = g.constant(Tensor::from_rows(&[vec![margin, 0.0, 0.0]]).unwrap());
            let ce = cross_entropy(&mut g, z, &[0]).unwrap();
            let ce = g.value(ce).item();
            assert!(ce < prev);
            prev = ce;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn two_class_ce_matches_hand_value() {
        let (a, b) = (0.3_f64, -1.2_f64);
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(&[vec![a, b]]).unwrap());
        let ce = cross_entropy(&mut g, z, &[1]).unwrap();
        let ce = g.value(ce).item();
        let expect = -(b.exp() / (a.exp() + b.exp())).ln();
        assert!((ce - expect).abs() < 1e-14);
    }

    #[test]
    fn itc_orthonormal_pairs() {
        for b in [2usize, 3, 4] {
            let mut g = Graph::new();
            let e = g.constant(Tensor::eye(b));
            let l = image_text_contrastive(&mut g, e, e, DEFAULT_TAU).unwrap().unwrap();
            let expect = (1.0 + (b as f64 - 1.0) * (-1.0 / DEFAULT_TAU).exp()).ln();
            assert!((g.value(l).item() - expect).abs() < 1e-14);
            assert!(expect < 1e-5);
        }
    }

    #[test]
    fn itc_undefined_for_single_item() {
        let mut store = ParamStore::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let head = MatchHead::new(&mut store, "itm", 2, &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let d = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let l = image_text_losses(&mut g, d, d, &[0], &head, DEFAULT_TAU).unwrap();
        assert!(!l.itc_defined);
        assert_eq!(g.value(l.itc).item(), 0.0);
    }

    #[test]
    fn itm_is_ln2_for_a_silent_head() {
        let mut store = ParamStore::new();
        // StepRng(0, 0) initialises every weight to the lower bound; zero the output layer
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let head = MatchHead::new(&mut store, "itm", 3, &mut rng).unwrap();
        *store.value_mut(head.out.weight) = Tensor::zeros(&[3, 1]);
        *store.value_mut(head.out.bias) = Tensor::zeros(&[1]);
        let mut g = Graph::with_params(&store);
        let d = g.constant(Tensor::eye(3));
        let l = image_text_losses(&mut g, d, d, &[0, 1, 2], &head, DEFAULT_TAU).unwrap();
        assert!((g.value(l.itm).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hardest_negative_skips_same_caption() {
        let sims = Tensor::from_rows(&[vec![1.0, 0.9, 0.2], vec![0.9, 1.0, 0.5], vec![0.1, 0.3, 1.0]]).unwrap();
        assert_eq!(hardest_negatives(&sims, &[0, 1, 2]), vec![Some(1), Some(0), Some(1)]);
        assert_eq!(hardest_negatives(&sims, &[0, 0, 2]), vec![Some(2), Some(2), Some(1)]);
        assert_eq!(hardest_negatives(&sims, &[4, 4, 4]), vec![None, None, None]);
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let it = g.constant(Tensor::scalar(1.0));
        let ce = g.constant(Tensor::scalar(2.0));
        let cc = g.constant(Tensor::scalar(3.0));
        let t = total_loss(&mut g, it, ce, cc, 0.10).unwrap();
        assert!((g.value(t).item() - 3.3).abs() < 1e-15);
        let t0 = total_loss(&mut g, it, ce, cc, 0.0).unwrap();
        assert_eq!(g.value(t0).item(), 3.0);
        assert_eq!(total_loss_value(1.0, 2.0, 3.0, 0.0), 3.0);
    }
}
