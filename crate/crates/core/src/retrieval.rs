//! Gallery ranking, Recall@K / AP, and per-weather evaluation reports.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde_json::{json, Map, Value};

use crate::data::dataset::LoadedSplit;
use crate::data::image::Image;
use crate::data::scene::mix_seed;
use crate::data::weather::{apply_weather, WeatherCondition};
use crate::error::{Error, Result};
use crate::model::GeoFuseModel;
use crate::parallel::{self, ExecMode};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    DroneToSatellite,
    SatelliteToDrone,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::DroneToSatellite, Direction::SatelliteToDrone];

    pub fn name(self) -> &'static str {
        match self {
            Direction::DroneToSatellite => "d2s",
            Direction::SatelliteToDrone => "s2d",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d2s" => Ok(Direction::DroneToSatellite),
            "s2d" => Ok(Direction::SatelliteToDrone),
            _ => Err(Error::Config(format!("unknown direction `{s}` (d2s|s2d)"))),
        }
    }
}

/// Parses `both`, `d2s` or `s2d`.
pub fn parse_directions(s: &str) -> Result<Vec<Direction>> {
    if s == "both" {
        Ok(Direction::BOTH.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gallery indices by ascending Euclidean distance to `query`; equal
/// distances keep ascending index order.
pub fn rank_gallery<G: AsRef<[f64]>>(query: &[f64], gallery: &[G]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(TensorError::Contract("cannot rank an empty gallery".into()).into());
    }
    let mut dist = Vec::with_capacity(gallery.len());
    for item in gallery {
        let item = item.as_ref();
        if item.len() != query.len() {
            return Err(
                TensorError::Dimension { op: "rank_gallery", lhs: vec![query.len()], rhs: vec![item.len()] }.into()
            );
        }
        dist.push(sq_dist(query, item));
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    // stable sort keeps index order on ties
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    Ok(order)
}

/// Fraction of queries with a relevant item in the first `k` positions.
/// `relevance[q][g]` marks gallery item `g` as relevant to query `q`;
/// queries without any relevant item are skipped.
pub fn recall_at_k(rankings: &[Vec<usize>], relevance: &[Vec<bool>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("recall@k needs k ≥ 1".into()));
    }
    let mut hits = 0usize;
    let mut counted = 0usize;
    let mut warned = false;
    for (rank, rel) in rankings.iter().zip(relevance) {
        if !rel.iter().any(|&r| r) {
            continue;
        }
        let kk = if k > rank.len() {
            if !warned {
                warn!("recall@{k} exceeds gallery size {}; clamping", rank.len());
                warned = true;
            }
            rank.len()
        } else {
            k
        };
        counted += 1;
        if rank[..kk].iter().any(|&g| rel[g]) {
            hits += 1;
        }
    }
    Ok(if counted == 0 { 0.0 } else { hits as f64 / counted as f64 })
}

/// Mean over relevant hits of precision at that rank, or `None` when no
/// item is relevant.
pub fn average_precision(ranking: &[usize], relevance: &[bool]) -> Option<f64> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (pos, &g) in ranking.iter().enumerate() {
        if relevance[g] {
            found += 1;
            sum += found as f64 / (pos + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanAp {
    pub mean: f64,
    pub evaluated: usize,
    /// Queries excluded for having no relevant item.
    pub skipped: usize,
}

pub fn mean_average_precision(rankings: &[Vec<usize>], relevance: &[Vec<bool>]) -> MeanAp {
    let mut sum = 0.0;
    let (mut evaluated, mut skipped) = (0, 0);
    for (rank, rel) in rankings.iter().zip(relevance) {
        match average_precision(rank, rel) {
            Some(ap) => {
                sum += ap;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    MeanAp { mean: if evaluated == 0 { 0.0 } else { sum / evaluated as f64 }, evaluated, skipped }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub ap: f64,
}

impl Metrics {
    pub fn mean_of(rows: &[Metrics]) -> Metrics {
        let n = rows.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Metrics { r1: sum(|m| m.r1), r5: sum(|m| m.r5), r10: sum(|m| m.r10), ap: sum(|m| m.ap) }
    }

    fn to_json(self) -> Value {
        json!({"r1": self.r1, "r5": self.r5, "r10": self.r10, "ap": self.ap})
    }
}

/// Metrics of ranking every query row against every gallery row, with
/// relevance given by label equality.
pub fn evaluate_features(
    queries: &Tensor,
    query_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
    mode: ExecMode,
) -> Result<(Metrics, usize)> {
    let items: Vec<&[f64]> = (0..gallery.rows()).map(|i| gallery.row(i)).collect();
    let rankings = parallel::map_range(mode, queries.rows(), |q| rank_gallery(queries.row(q), &items))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let relevance: Vec<Vec<bool>> =
        query_labels.iter().map(|ql| gallery_labels.iter().map(|gl| gl == ql).collect()).collect();
    let ap = mean_average_precision(&rankings, &relevance);
    let metrics = Metrics {
        r1: recall_at_k(&rankings, &relevance, 1)?,
        r5: recall_at_k(&rankings, &relevance, 5)?,
        r10: recall_at_k(&rankings, &relevance, 10)?,
        ap: ap.mean,
    };
    Ok((metrics, ap.skipped))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub conditions: Vec<(WeatherCondition, Metrics)>,
    pub mean: Metrics,
    pub queries: usize,
    pub gallery: usize,
    /// Queries without a relevant gallery item, excluded from AP.
    pub skipped: usize,
}

impl RetrievalReport {
    pub fn metrics(&self, condition: WeatherCondition) -> Option<Metrics> {
        self.conditions.iter().find(|(c, _)| *c == condition).map(|(_, m)| *m)
    }

    pub fn to_json(&self) -> Value {
        let mut conds = Map::new();
        for (c, m) in &self.conditions {
            conds.insert(c.name().to_string(), m.to_json());
        }
        json!({
            "direction": self.direction.name(),
            "queries": self.queries,
            "gallery": self.gallery,
            "skipped": self.skipped,
            "conditions": conds,
            "mean": self.mean.to_json(),
        })
    }
}

pub const CSV_HEADER: &str = "direction,condition,r1,r5,r10,ap";

pub fn reports_to_json(reports: &[RetrievalReport]) -> String {
    let v = Value::Array(reports.iter().map(RetrievalReport::to_json).collect());
    serde_json::to_string_pretty(&v).expect("plain JSON values") + "\n"
}

pub fn reports_to_csv(reports: &[RetrievalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let rows = r.conditions.iter().map(|(c, m)| (c.name(), *m)).chain([("Mean", r.mean)]);
        for (name, m) in rows {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.direction, name, m.r1, m.r5, m.r10, m.ap));
        }
    }
    out
}

/// Fixed-width text table of R@1 / AP per condition, in percent.
pub fn summary_table(reports: &[RetrievalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!("{} ({} queries, gallery {})\n", r.direction, r.queries, r.gallery));
        out.push_str(&format!("  {:<10} {:>7} {:>7} {:>7} {:>7}\n", "condition", "R@1", "R@5", "R@10", "AP"));
        let rows = r.conditions.iter().map(|(c, m)| (c.name(), *m)).chain([("Mean", r.mean)]);
        for (name, m) in rows {
            out.push_str(&format!(
                "  {:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2}\n",
                name,
                100.0 * m.r1,
                100.0 * m.r5,
                100.0 * m.r10,
                100.0 * m.ap
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub directions: Vec<Direction>,
    pub conditions: Vec<WeatherCondition>,
    pub severity: f64,
    /// Seeds the per-image weather overlays.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            directions: Direction::BOTH.to_vec(),
            conditions: WeatherCondition::ALL.to_vec(),
            severity: 0.7,
            seed: 0,
        }
    }
}

/// Corrupts every drone image of `split` with `condition`, one seed per
/// image.
pub fn corrupt_drones(
    split: &LoadedSplit,
    condition: WeatherCondition,
    severity: f64,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<Image>> {
    parallel::map_range(mode, split.drone.len(), |i| {
        let s = mix_seed(&[seed, condition.index() as u64, i as u64]);
        apply_weather(&split.drone[i].1, condition, severity, s)
    })
    .into_iter()
    .collect()
}

/// One report per direction. Drone→satellite ranks weather-corrupted drone
/// queries against the fused satellite/roadmap gallery (one item per
/// class); satellite→drone ranks fused class embeddings against the
/// corrupted drone set, with every drone view of the class relevant.
pub fn evaluate_conditions(
    model: &GeoFuseModel,
    split: &LoadedSplit,
    opts: &EvalOptions,
    mode: ExecMode,
) -> Result<Vec<RetrievalReport>> {
    if opts.conditions.is_empty() || opts.directions.is_empty() {
        return Err(Error::Config("evaluation needs at least one condition and direction".into()));
    }
    let (_, fused) = model.pair_feature_matrices(&split.satellite, &split.roadmap, mode)?;
    let class_labels: Vec<usize> = (0..split.num_classes()).collect();
    let drone_labels: Vec<usize> = split.drone.iter().map(|(c, _)| *c).collect();
    let mut per_dir: Vec<(Vec<(WeatherCondition, Metrics)>, usize)> = vec![(Vec::new(), 0); opts.directions.len()];
    for &cond in &opts.conditions {
        let imgs = corrupt_drones(split, cond, opts.severity, opts.seed, mode)?;
        let refs: Vec<&Image> = imgs.iter().collect();
        let drones = model.drone_features(&refs, mode)?;
        for (slot, dir) in per_dir.iter_mut().zip(&opts.directions) {
            let (m, skipped) = match dir {
                Direction::DroneToSatellite => evaluate_features(&drones, &drone_labels, &fused, &class_labels, mode)?,
                Direction::SatelliteToDrone => evaluate_features(&fused, &class_labels, &drones, &drone_labels, mode)?,
            };
            slot.0.push((cond, m));
            slot.1 = skipped;
        }
    }
    Ok(opts
        .directions
        .iter()
        .zip(per_dir)
        .map(|(&direction, (conditions, skipped))| {
            let rows: Vec<Metrics> = conditions.iter().map(|(_, m)| *m).collect();
            let (queries, gallery) = match direction {
                Direction::DroneToSatellite => (drone_labels.len(), class_labels.len()),
                Direction::SatelliteToDrone => (class_labels.len(), drone_labels.len()),
            };
            RetrievalReport { direction, mean: Metrics::mean_of(&rows), conditions, queries, gallery, skipped }
        })
        .collect())
}
