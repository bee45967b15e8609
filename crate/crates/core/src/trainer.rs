//! SGD training with milestone decay, class-anchor refresh and the
//! combined objective `L_IT + L_CE + λ·L_CC`.

use std::sync::mpsc::sync_channel;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{AnchorRefresh, Modality, TrainConfig};
use crate::data::augment::AugTransform;
use crate::data::dataset::LoadedSplit;
use crate::data::image::Image;
use crate::data::render::pseudo_auxiliary;
use crate::data::scene::{mix_seed, rng_for};
use crate::data::weather::{apply_weather, WeatherCondition};
use crate::encoder::{encode_captions, WeatherCaption, CAPTION_TEMPLATES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    class_contrastive_loss, image_text_losses, instance_ce_loss, positive_mask, similarity_to_anchors, total_loss,
    AnchorSet,
};
use crate::model::GeoFuseModel;
use crate::parallel::ExecMode;
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Tensor, TensorError};

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Vec<Option<Tensor>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Classical momentum: `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`. Frozen
/// parameters are left alone; a parameter absent from `grads` is treated as
/// having zero gradient.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() < store.len() {
        state.velocity.resize(store.len(), None);
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let grad = grads.get(id);
        if let Some(g) = grad {
            if g.shape() != p.value.shape() {
                return Err(TensorError::Contract(format!(
                    "gradient for `{}` has shape {:?}, parameter is {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                ))
                .into());
            }
        }
        let v = state.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        let theta = p.value.data_mut();
        for (k, (vk, tk)) in v.data_mut().iter_mut().zip(theta.iter_mut()).enumerate() {
            let gk = grad.map_or(0.0, |g| g.data()[k]);
            *vk = momentum * *vk + (gk + weight_decay * *tk);
            *tk -= lr * *vk;
        }
    }
    Ok(())
}

/// Copy of `split` with the roadmaps replaced according to `modality`.
pub fn prepare_split(split: &LoadedSplit, modality: Modality) -> LoadedSplit {
    let mut out = split.clone();
    match modality {
        Modality::Roadmap => {}
        Modality::Blank => out.blank_roadmaps(),
        Modality::Pseudo => {
            out.roadmap = out.satellite.iter().map(pseudo_auxiliary).collect();
        }
    }
    out
}

/// Satellite and fused features of every class's (unaugmented) gallery
/// pair under the current parameters.
pub fn build_anchor_set(model: &GeoFuseModel, split: &LoadedSplit, mode: ExecMode) -> Result<AnchorSet> {
    let (sat, fused) = model.pair_feature_matrices(&split.satellite, &split.roadmap, mode)?;
    AnchorSet::new(split.classes.clone(), sat, fused)
}

/// Recomputes the anchors from the current parameters; the model is only
/// read.
pub fn refresh_anchors(model: &GeoFuseModel, split: &LoadedSplit, mode: ExecMode) -> Result<AnchorSet> {
    build_anchor_set(model, split, mode)
}

/// One prepared mini-batch: corrupted drone views and, per sample, the
/// matching satellite/roadmap pair, all under the sample's transform.
#[derive(Debug, Clone)]
pub struct Batch {
    pub epoch: usize,
    pub step: usize,
    /// Drone indices into the split.
    pub items: Vec<usize>,
    pub labels: Vec<usize>,
    pub conditions: Vec<WeatherCondition>,
    pub captions: Vec<WeatherCaption>,
    pub drones: Vec<Image>,
    pub satellites: Vec<Image>,
    pub roadmaps: Vec<Image>,
}

/// Shuffled drone indices for `epoch`, chunked into batches (the last one
/// may be short).
pub fn epoch_plan(cfg: &TrainConfig, n: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(&[cfg.seed, epoch as u64, 0x5_4FF1]));
    order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

pub fn prepare_batch(
    split: &LoadedSplit,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
    items: &[usize],
) -> Result<Batch> {
    let mut b = Batch {
        epoch,
        step,
        items: items.to_vec(),
        labels: Vec::with_capacity(items.len()),
        conditions: Vec::with_capacity(items.len()),
        captions: Vec::with_capacity(items.len()),
        drones: Vec::with_capacity(items.len()),
        satellites: Vec::with_capacity(items.len()),
        roadmaps: Vec::with_capacity(items.len()),
    };
    for (j, &i) in items.iter().enumerate() {
        let seed = mix_seed(&[cfg.seed, epoch as u64, step as u64, j as u64, 0xBA7C]);
        let mut rng = rng_for(&[seed]);
        let condition = WeatherCondition::ALL[rng.gen_range(0..WeatherCondition::ALL.len())];
        let caption = WeatherCaption::new(condition, rng.gen_range(0..CAPTION_TEMPLATES.len()))?;
        let (label, drone) = &split.drone[i];
        let drone = apply_weather(drone, condition, cfg.weather_severity, seed)?;
        let t = if cfg.augment { AugTransform::sample(seed) } else { AugTransform::IDENTITY };
        b.labels.push(*label);
        b.conditions.push(condition);
        b.captions.push(caption);
        b.drones.push(t.apply(&drone));
        let extra = &split.archive[*label];
        let sat = match rng.gen_range(0..=extra.len()) {
            0 => &split.satellite[*label],
            k => &extra[k - 1],
        };
        b.satellites.push(t.apply(sat));
        b.roadmaps.push(t.apply(&split.roadmap[*label]));
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub it: Var,
    pub ce: Var,
    pub cc: Var,
    pub total: Var,
}

/// Builds the full objective for `batch` on `g`.
pub fn batch_loss(
    g: &mut Graph<'_>,
    model: &GeoFuseModel,
    batch: &Batch,
    anchors: &AnchorSet,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let mut d_hidden = Vec::with_capacity(batch.items.len());
    let mut d_feat = Vec::with_capacity(batch.items.len());
    let mut s_hidden = Vec::with_capacity(batch.items.len());
    let mut f_hidden = Vec::with_capacity(batch.items.len());
    for k in 0..batch.items.len() {
        let d = model.image_forward(g, &batch.drones[k], crate::data::dataset::View::Drone)?;
        d_hidden.push(d.hidden);
        d_feat.push(d.feature);
        let p = model.pair_forward(g, &batch.satellites[k], &batch.roadmaps[k])?;
        s_hidden.push(p.satellite.hidden);
        f_hidden.push(p.hidden);
    }
    let d_hidden = g.concat_rows(&d_hidden)?;
    let d_feat = g.concat_rows(&d_feat)?;
    let s_hidden = g.concat_rows(&s_hidden)?;
    let f_hidden = g.concat_rows(&f_hidden)?;

    let ce = instance_ce_loss(g, d_hidden, s_hidden, f_hidden, &batch.labels, &model.head)?;

    let sa = g.constant(anchors.sat.clone());
    let fa = g.constant(anchors.fused.clone());
    let sims = similarity_to_anchors(g, d_feat, sa, fa, cfg.tau)?;
    let class_ids: Vec<usize> = (0..anchors.len()).collect();
    let mask = positive_mask(&batch.labels, &class_ids)?;
    let cc = class_contrastive_loss(g, &sims, &mask)?.total;

    let it = if cfg.image_text {
        let text = encode_captions(g, &batch.captions, &model.text)?;
        let drone_t = model.text_side(g, d_hidden)?;
        let groups: Vec<usize> = batch.captions.iter().map(WeatherCaption::row).collect();
        image_text_losses(g, drone_t, text, &groups, &model.itm, cfg.tau)?.total
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let total = total_loss(g, it, ce, cc, cfg.lambda)?;
    Ok(LossVars { it, ce, cc, total })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub it: f64,
    pub ce: f64,
    pub cc: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,L_IT,L_CE,L_CC,L_total,lr";

pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{},{},{},{},{}\n", r.epoch, r.step, r.it, r.ce, r.cc, r.total, r.lr));
    }
    out
}

/// Mean total loss of each epoch.
pub fn epoch_means(records: &[LossRecord]) -> Vec<f64> {
    let epochs = records.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = records.iter().filter(|r| r.epoch == e).map(|r| r.total).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LossRecord>,
    /// Anchors recomputed from the final parameters.
    pub anchors: AnchorSet,
}

/// Trains `model` in place on `split` (roadmaps replaced per
/// `cfg.modality`). Batches are prepared on a producer thread at most two
/// ahead, in the seeded order. A non-finite loss aborts with a numerical
/// error describing the batch.
pub fn train(model: &mut GeoFuseModel, split: &LoadedSplit, cfg: &TrainConfig, mode: ExecMode) -> Result<TrainReport> {
    cfg.validate()?;
    if split.classes != model.classes {
        return Err(Error::Data("training split classes differ from the model's classes".into()));
    }
    if split.drone.is_empty() {
        return Err(Error::Data("training split has no drone images".into()));
    }
    let split = prepare_split(split, cfg.modality);
    let mut anchors = build_anchor_set(model, &split, mode)?;
    let mut state = SgdState::new();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.anchor_refresh == AnchorRefresh::Epoch {
            anchors = refresh_anchors(model, &split, mode)?;
        }
        let lr = cfg.lr_at(epoch);
        let plan = epoch_plan(cfg, split.drone.len(), epoch);
        let split_ref = &split;
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Batch>>(2);
            let plan_ref = &plan;
            scope.spawn(move || {
                for (step, items) in plan_ref.iter().enumerate() {
                    if tx.send(prepare_batch(split_ref, cfg, epoch, step, items)).is_err() {
                        break;
                    }
                }
            });
            for batch in rx {
                let batch = batch?;
                let (record, grads) = {
                    let mut g = Graph::with_params(&model.store);
                    let v = batch_loss(&mut g, model, &batch, &anchors, cfg)?;
                    let val = |x: Var| g.value(x).item();
                    let record = LossRecord {
                        epoch,
                        step: batch.step,
                        it: val(v.it),
                        ce: val(v.ce),
                        cc: val(v.cc),
                        total: val(v.total),
                        lr,
                    };
                    if ![record.it, record.ce, record.cc, record.total].iter().all(|x| x.is_finite()) {
                        return Err(Error::Numerical(format!(
                            "non-finite loss at epoch {epoch} step {}: L_IT={} L_CE={} L_CC={} L_total={}; drone items {:?}",
                            batch.step, record.it, record.ce, record.cc, record.total, batch.items
                        )));
                    }
                    (record, g.backward(v.total)?)
                };
                let mut grads = grads;
                if cfg.clip_norm > 0.0 {
                    let norm = grads.global_norm();
                    if norm > cfg.clip_norm {
                        grads.scale(cfg.clip_norm / norm);
                    }
                }
                sgd_step(&mut model.store, &grads, &mut state, lr, cfg.momentum, cfg.weight_decay)?;
                debug!(
                    "epoch {epoch} step {}: total {:.5} (it {:.4} ce {:.4} cc {:.4})",
                    record.step, record.total, record.it, record.ce, record.cc
                );
                log.push(record);
            }
            Ok(())
        })?;
        let mean = epoch_means(&log).last().copied().unwrap_or(f64::NAN);
        info!("epoch {}/{} lr {lr} mean loss {mean:.5}", epoch + 1, cfg.epochs);
    }
    let anchors = refresh_anchors(model, &split, mode)?;
    Ok(TrainReport { log, anchors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{synth_split, Split, SynthConfig};
    use crate::data::render::RenderOptions;
    use crate::encoder::EncoderConfig;
    use crate::losses::total_loss_value;
    use crate::model::ModelConfig;

    #[test]
    fn plain_descent_and_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut grads = Gradients::default();
        grads.insert(id, Tensor::new(&[2], vec![0.5, 0.25]).unwrap());
        let mut st = SgdState::new();
        sgd_step(&mut store, &grads, &mut st, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(store.value(id).data(), &[1.0 - 0.05, -2.0 - 0.025]);

        let before = store.value(id).clone();
        let mut zero = Gradients::default();
        zero.insert(id, Tensor::zeros(&[2]));
        sgd_step(&mut store, &zero, &mut SgdState::new(), 0.1, 0.9, 0.0).unwrap();
        assert_eq!(store.value(id), &before);

        let mut wrong = Gradients::default();
        wrong.insert(id, Tensor::zeros(&[3]));
        assert!(sgd_step(&mut store, &wrong, &mut st, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn momentum_matches_scalar_recurrence() {
        // f = θ²/2, so g = θ
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut store = ParamStore::new();
        let id = store.add("t", Tensor::scalar(1.0)).unwrap();
        let mut st = SgdState::new();
        let (mut theta, mut v) = (1.0_f64, 0.0_f64);
        for _ in 0..2 {
            let mut grads = Gradients::default();
            grads.insert(id, Tensor::scalar(store.value(id).item()));
            sgd_step(&mut store, &grads, &mut st, lr, mu, wd).unwrap();
            v = mu * v + theta + wd * theta;
            theta -= lr * v;
        }
        assert_eq!(store.value(id).item(), theta);
        // without decay: 0.9 after one step, then 0.9 - 0.1·(0.9·1 + 0.9) = 0.72
        let mut store = ParamStore::new();
        let id = store.add("t", Tensor::scalar(1.0)).unwrap();
        let mut st = SgdState::new();
        for _ in 0..2 {
            let mut grads = Gradients::default();
            grads.insert(id, Tensor::scalar(store.value(id).item()));
            sgd_step(&mut store, &grads, &mut st, 0.1, 0.9, 0.0).unwrap();
        }
        assert!((store.value(id).item() - 0.72).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0)).unwrap();
        store.set_trainable(id, false);
        let mut grads = Gradients::default();
        grads.insert(id, Tensor::scalar(1.0));
        sgd_step(&mut store, &grads, &mut SgdState::new(), 1.0, 0.9, 0.1).unwrap();
        assert_eq!(store.value(id).item(), 0.0);
    }

    fn tiny_setup() -> (GeoFuseModel, LoadedSplit, TrainConfig) {
        let synth = SynthConfig {
            classes: 3,
            train_views: 2,
            test_views: 1,
            size: 16,
            seed: 4,
            render: RenderOptions::default(),
            disjoint_test: false,
            train_captures: 2,
        };
        let (split, _) = synth_split(&synth, Split::Train, ExecMode::default()).unwrap();
        let mc = ModelConfig {
            encoder: EncoderConfig {
                image_size: 16,
                patch_size: 8,
                d_model: 8,
                depth: 1,
                heads: 2,
                ..EncoderConfig::default()
            },
            fusion_heads: 2,
            channel_heads: 2,
            ..ModelConfig::default()
        };
        let model = GeoFuseModel::new(mc, split.classes.clone(), 1).unwrap();
        let cfg =
            TrainConfig { epochs: 2, batch_size: 4, milestones: vec![1], factors: vec![0.1], ..TrainConfig::default() };
        (model, split, cfg)
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let (mut model, split, mut cfg) = tiny_setup();
        cfg.lr = 0.0;
        let before = model.store.clone();
        train(&mut model, &split, &cfg, ExecMode::default()).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
        }
    }

    #[test]
    fn same_seed_same_trajectory_and_components_combine() {
        let (model, split, cfg) = tiny_setup();
        let (mut a, mut b) = (model.clone(), model);
        let la = train(&mut a, &split, &cfg, ExecMode::Parallel).unwrap();
        let lb = train(&mut b, &split, &cfg, ExecMode::Sequential).unwrap();
        assert_eq!(la.log, lb.log);
        assert_eq!(la.log.len(), 4);
        for r in &la.log {
            assert!((r.total - total_loss_value(r.it, r.ce, r.cc, cfg.lambda)).abs() <= 1e-12);
        }
        assert_eq!(la.log[2].lr, cfg.lr * 0.1);
        let csv = loss_log_csv(&la.log);
        assert!(csv.starts_with("epoch,step,L_IT,L_CE,L_CC,L_total,lr\n0,0,"));
    }

    #[test]
    fn anchors_refresh_and_move_after_a_step() {
        let (mut model, split, mut cfg) = tiny_setup();
        let a0 = build_anchor_set(&model, &split, ExecMode::default()).unwrap();
        assert_eq!(refresh_anchors(&model, &split, ExecMode::default()).unwrap(), a0);
        cfg.epochs = 1;
        let report = train(&mut model, &split, &cfg, ExecMode::default()).unwrap();
        assert_eq!(report.anchors, build_anchor_set(&model, &split, ExecMode::default()).unwrap());
        assert_ne!(report.anchors.fused, a0.fused);
    }

    #[test]
    fn blank_modality_whitens_roadmaps() {
        let (_, split, _) = tiny_setup();
        let blank = prepare_split(&split, Modality::Blank);
        assert!(blank.roadmap.iter().all(|r| r.data().iter().all(|v| *v == 1.0)));
        assert_eq!(blank.satellite, split.satellite);
        let pseudo = prepare_split(&split, Modality::Pseudo);
        assert_ne!(pseudo.roadmap, split.roadmap);
    }
}
