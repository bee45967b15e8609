//! Subcommands of the `geofuse` binary. Each one echoes its resolved
//! configuration before doing any work.
//!
//! Exit codes: 0 success, 1 validation or I/O error, 2 numerical failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use geofuse::checkpoint;
use geofuse::config::{Ablation, ExperimentConfig, Modality};
use geofuse::data::dataset::{export_synthetic, LoadedSplit, Split, SynthConfig};
use geofuse::data::{load_dataset, RenderOptions};
use geofuse::model::GeoFuseModel;
use geofuse::parallel::ExecMode;
use geofuse::retrieval::{
    evaluate_conditions, parse_directions, reports_to_csv, reports_to_json, summary_table, EvalOptions, RetrievalReport,
};
use geofuse::trainer::{loss_log_csv, prepare_split, train, TrainReport};
use geofuse::verify::{run_suite, Scope, DEFAULT_TOL};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "geofuse", version, about = "Satellite/road-map fusion for drone geo-localization")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic benchmark to disk.
    SynthGen(SynthArgs),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint under every weather condition.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    pub classes: usize,
    /// Training drone views per class.
    #[arg(long, default_value_t = 8)]
    pub views_per_class: usize,
    /// Test drone views per class (defaults to --views-per-class).
    #[arg(long)]
    pub test_views: Option<usize>,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Test on new locations instead of new captures of the training ones.
    #[arg(long)]
    pub disjoint_test: bool,
    /// Archive satellite captures per training location.
    #[arg(long, default_value_t = 1)]
    pub captures: usize,
    /// Fraction of each archive satellite image under cloud.
    #[arg(long, default_value_t = RenderOptions::default().cloud_cover)]
    pub cloud_cover: f64,
    /// Probability that an archived building differs from the current scene.
    #[arg(long, default_value_t = RenderOptions::default().satellite_staleness)]
    pub staleness: f64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=10`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// token-only | no-cc | no-it
    #[arg(long)]
    pub ablate: Option<String>,
    /// roadmap | blank | pseudo
    #[arg(long)]
    pub modality: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// both | d2s | s2d
    #[arg(long, default_value = "both")]
    pub directions: String,
    #[arg(long, default_value_t = 0.7)]
    pub severity: f64,
    /// Weather overlay seed (defaults to the checkpoint's training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (defaults to the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// all | fusion | losses
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
}

/// Failure that maps to [`EXIT_NUMERICAL`].
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<NumericalFailure>().is_some()
            || e.downcast_ref::<geofuse::Error>().is_some_and(geofuse::Error::is_numerical)
    });
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_INVALID
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors are reported on stderr.
pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mode = if cli.sequential { ExecMode::Sequential } else { ExecMode::Parallel };
    match &cli.command {
        Command::SynthGen(a) => synth_gen(a, mode),
        Command::Train(a) => train_cmd(a, mode).map(|_| ()),
        Command::Eval(a) => eval_cmd(a, mode).map(|_| ()),
        Command::Gradcheck(a) => gradcheck_cmd(a, mode),
    }
}

pub fn synth_gen(a: &SynthArgs, mode: ExecMode) -> Result<()> {
    let cfg = SynthConfig {
        classes: a.classes,
        train_views: a.views_per_class,
        test_views: a.test_views.unwrap_or(a.views_per_class),
        size: a.size,
        seed: a.seed,
        render: RenderOptions {
            cloud_cover: a.cloud_cover,
            satellite_staleness: a.staleness,
            ..RenderOptions::default()
        },
        disjoint_test: a.disjoint_test,
        train_captures: a.captures,
    };
    println!(
        "synth-gen: classes={} train_views={} test_views={} size={} seed={} disjoint_test={} captures={} cloud_cover={} staleness={} out={} force={}",
        cfg.classes,
        cfg.train_views,
        cfg.test_views,
        cfg.size,
        cfg.seed,
        cfg.disjoint_test,
        cfg.train_captures,
        cfg.render.cloud_cover,
        cfg.render.satellite_staleness,
        a.out.display(),
        a.force
    );
    let lines = export_synthetic(&a.out, &cfg, a.force, mode)?;
    println!("wrote {} files and the manifest to {}", lines.len(), a.out.display());
    Ok(())
}

/// Base config plus file, `--set`, `--ablate`, `--modality` and `--seed`,
/// applied in that order.
pub fn resolve_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        pairs.extend(ExperimentConfig::parse_text(&text)?);
    }
    for o in &a.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{o}`"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut cfg = ExperimentConfig::default();
    cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    if let Some(ab) = &a.ablate {
        cfg.apply_ablation(ab.parse::<Ablation>()?);
    }
    if let Some(m) = &a.modality {
        cfg.train.modality = m.parse::<Modality>()?;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_splits(root: &Path, mode: ExecMode) -> Result<(LoadedSplit, LoadedSplit)> {
    let index = load_dataset(root)?;
    let train = LoadedSplit::from_index(index.split(Split::Train), mode)?;
    let test = LoadedSplit::from_index(index.split(Split::Test), mode)?;
    Ok((train, test))
}

fn check_size(split: &LoadedSplit, cfg: &ExperimentConfig) -> Result<()> {
    let want = cfg.model.encoder.image_size;
    if split.image_size() != want {
        bail!("dataset images are {}px but model.image_size is {want}", split.image_size());
    }
    Ok(())
}

fn eval_options(cfg: &ExperimentConfig, directions: &str, severity: f64, seed: Option<u64>) -> Result<EvalOptions> {
    Ok(EvalOptions {
        directions: parse_directions(directions)?,
        severity,
        seed: seed.unwrap_or(cfg.train.seed),
        ..EvalOptions::default()
    })
}

fn write_reports(dir: &Path, reports: &[RetrievalReport]) -> Result<()> {
    let json = dir.join(REPORT_JSON);
    fs::write(&json, reports_to_json(reports)).with_context(|| format!("writing {}", json.display()))?;
    let csv = dir.join(REPORT_CSV);
    fs::write(&csv, reports_to_csv(reports)).with_context(|| format!("writing {}", csv.display()))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: ExperimentConfig,
    pub train: TrainReport,
    pub reports: Vec<RetrievalReport>,
}

pub fn train_cmd(a: &TrainArgs, mode: ExecMode) -> Result<TrainOutcome> {
    let cfg = resolve_config(a)?;
    let echo = cfg.to_text();
    println!("train: data={} out={}\n{echo}", a.data.display(), a.out.display());
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join(CONFIG_FILE), &echo)?;

    let (train_split, test_split) = load_splits(&a.data, mode)?;
    check_size(&train_split, &cfg)?;
    let mut model = GeoFuseModel::new(cfg.model, train_split.classes.clone(), cfg.train.seed)?;
    let t = Instant::now();
    let report = train(&mut model, &train_split, &cfg.train, mode)?;
    info!("training took {:.1}s", t.elapsed().as_secs_f64());
    fs::write(a.out.join(LOSS_LOG_FILE), loss_log_csv(&report.log))?;
    checkpoint::save(&a.out.join(CHECKPOINT_FILE), &model, &cfg)?;

    let opts = eval_options(&cfg, "both", EvalOptions::default().severity, None)?;
    let test_split = prepare_split(&test_split, cfg.train.modality);
    let reports = evaluate_conditions(&model, &test_split, &opts, mode)?;
    write_reports(&a.out, &reports)?;
    println!("{}", summary_table(&reports));
    Ok(TrainOutcome { config: cfg, train: report, reports })
}

pub fn eval_cmd(a: &EvalArgs, mode: ExecMode) -> Result<Vec<RetrievalReport>> {
    let (model, cfg) = checkpoint::load(&a.checkpoint)?;
    let opts = eval_options(&cfg, &a.directions, a.severity, a.seed)?;
    let out = match &a.out {
        Some(o) => o.clone(),
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let dirs: Vec<&str> = opts.directions.iter().map(|d| d.name()).collect();
    println!(
        "eval: data={} checkpoint={} directions={} severity={} seed={} modality={} out={}",
        a.data.display(),
        a.checkpoint.display(),
        dirs.join(","),
        opts.severity,
        opts.seed,
        cfg.train.modality,
        out.display()
    );
    let index = load_dataset(&a.data)?;
    let test = LoadedSplit::from_index(index.split(Split::Test), mode)?;
    check_size(&test, &cfg)?;
    let test = prepare_split(&test, cfg.train.modality);
    let reports = evaluate_conditions(&model, &test, &opts, mode)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_reports(&out, &reports)?;
    println!("{}", summary_table(&reports));
    Ok(reports)
}

pub fn gradcheck_cmd(a: &GradcheckArgs, mode: ExecMode) -> Result<()> {
    let scope: Scope = a.scope.parse()?;
    if !(a.tol >= 0.0) {
        bail!("--tol must be non-negative, got {}", a.tol);
    }
    println!("gradcheck: scope={} tol={:e}", a.scope, a.tol);
    let report = run_suite(scope, mode)?;
    for r in &report.results {
        let flag = if r.report.passes(a.tol) { "ok  " } else { "FAIL" };
        println!("{flag} {r}");
    }
    println!("{} checks, max rel err {:.3e}, {:.1}s", report.results.len(), report.max_rel_err(), report.seconds);
    let bad = report.offenders(a.tol);
    if !bad.is_empty() {
        let names: Vec<String> = bad.iter().map(|r| format!("{} ({:.3e})", r.name, r.report.max_rel_err)).collect();
        return Err(
            NumericalFailure(format!("gradient check above tolerance {:e}: {}", a.tol, names.join(", "))).into()
        );
    }
    Ok(())
}
