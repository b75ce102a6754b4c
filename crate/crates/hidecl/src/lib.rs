//! Experiment runner behind the `hidecl` binary: configuration, pretraining,
//! continual runs, ablations, theory checks and offline reports.

pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use hide_core::backbone::{pretrain_backbone, Backbone, BackboneWeights, PretrainReport};
use hide_core::checkpoint::{write_atomic, Checkpoint};
use hide_core::engine::{default_grid, run_ablation, AblationRow, EvalCounts, Learner, TaskLog, TrainConfig};
use hide_core::harness::{
    accuracy_matrix, load_embeddings, make_stream, metrics, metrics_json, split_dataset, synth_dataset, write_results,
    AccuracyMatrix, Dataset, Metrics, TaskStream,
};
use hide_core::theory::{run_theory_checks, TheoryReport};
use serde::Serialize;

pub use config::ExperimentConfig;
use config::{BackboneSection, DatasetSection};

#[derive(Debug)]
pub enum CliError {
    /// Bad command line; exit 2.
    Usage(String),
    /// Invalid configuration or missing inputs; exit 2.
    Config(String),
    /// Failure while running; exit 1.
    Run(hide_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Run(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Config(m) => f.write_str(m),
            Self::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<hide_core::Error> for CliError {
    fn from(e: hide_core::Error) -> Self {
        Self::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Run(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const STATUS_FILE: &str = "status.json";
pub const CONFIG_ECHO: &str = "config.json";
pub const PLOT_FILE: &str = "aa_curve.svg";

#[derive(Clone, Debug, Serialize)]
pub struct Status {
    pub state: &'static str,
    pub completed_tasks: usize,
    pub total_tasks: usize,
    pub files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

/// Frozen backbone for `cfg`: loaded weights, in-process pretraining, or the
/// seeded random initialization, in that order of preference.
pub fn build_backbone(cfg: &ExperimentConfig, dataset: &Dataset) -> CliResult<(Backbone, Option<PretrainReport>)> {
    match &cfg.backbone {
        BackboneSection::Embedding => {
            let dim = dataset.train.first().map_or(0, |e| e.input.len());
            Ok((Backbone::embedding(dim), None))
        }
        BackboneSection::Transformer { config, weights: Some(path), .. } => {
            let ck = Checkpoint::read(path)?;
            let w = BackboneWeights::from_named(config, |n| ck.get(n).cloned())
                .map_err(|e| CliError::Config(format!("backbone.weights: {e}")))?;
            let mut bb = Backbone::transformer(w);
            bb.freeze();
            Ok((bb, None))
        }
        BackboneSection::Transformer { config, pretrain: Some(p), .. } => {
            let aux = synth_dataset(&p.data)?;
            log::info!("pretraining on {} auxiliary examples", aux.train.len());
            let (bb, report) = pretrain_backbone(config, &aux.train, &p.optimizer)?;
            Ok((bb, Some(report)))
        }
        BackboneSection::Transformer { config, .. } => {
            log::warn!("no weights or pretraining configured; using random backbone weights");
            let mut bb = Backbone::transformer(BackboneWeights::random(config, 0)?);
            bb.freeze();
            Ok((bb, None))
        }
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    match &cfg.stream.dataset {
        DatasetSection::Synthetic { spec } => Ok(synth_dataset(spec)?),
        DatasetSection::Embeddings { path } => {
            let rows = load_embeddings(path).map_err(|e| CliError::Config(format!("stream.dataset.path: {e}")))?;
            Ok(split_dataset(rows, 0)?)
        }
    }
}

pub fn build_stream(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> CliResult<TaskStream> {
    Ok(make_stream(dataset, cfg.stream.setting, cfg.stream.tasks, seed)?)
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.train.clone() }
}

#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    /// Counts over all tasks after the final task.
    pub final_counts: EvalCounts,
    pub tii_accuracy: f64,
    pub key_match_accuracy: f64,
    pub per_task: Vec<TaskLog>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub matrix: AccuracyMatrix,
    pub metrics: Metrics,
    pub diagnostics: Diagnostics,
}

/// Runs the continual loop for `cfg` with `backbone`, writing every output
/// into `out`. `status.json` tracks progress and records failures.
pub fn run_with_backbone(cfg: &ExperimentConfig, backbone: Arc<Backbone>, dataset: &Dataset, out: &Path) -> CliResult<RunSummary> {
    fs::create_dir_all(out)?;
    let total = cfg.stream.tasks;
    let status = |state, done, files: &[&str], error: Option<String>| {
        let s = Status { state, completed_tasks: done, total_tasks: total, files: files.iter().map(|f| f.to_string()).collect(), error };
        write_json(&out.join(STATUS_FILE), &s)
    };
    status("running", 0, &[], None)?;
    let result = (|| -> CliResult<RunSummary> {
        let mut echo_cfg = cfg.clone();
        echo_cfg.output = Some(out.to_path_buf());
        let echo = echo_cfg.echo();
        write_atomic(&out.join(CONFIG_ECHO), echo.as_bytes())?;
        let stream = build_stream(cfg, dataset, cfg.seed)?;
        let mut learner = Learner::new(
            backbone,
            cfg.plan.clone(),
            train_config(cfg, cfg.seed),
            cfg.ablation,
            stream.setting,
            stream.len(),
            stream.classes,
        )?;
        if cfg.snapshots {
            fs::create_dir_all(out.join("checkpoints"))?;
        }
        let matrix = accuracy_matrix(&mut learner, &stream, |t, l| {
            if cfg.snapshots {
                l.to_checkpoint(echo.as_bytes()).write(&out.join("checkpoints").join(format!("task_{}.hide", t + 1)))?;
            }
            log::info!("task {}/{} done", t + 1, total);
            status("running", t + 1, &[], None).map_err(|e| match e {
                CliError::Run(e) => e,
                other => hide_core::Error::State(other.to_string()),
            })
        })?;
        let m = metrics(&matrix)?;
        write_results(out, &matrix, &m)?;
        let c = learner.eval_totals();
        let diagnostics = Diagnostics {
            final_counts: c,
            tii_accuracy: c.task_correct as f64 / c.total as f64,
            key_match_accuracy: c.key_correct as f64 / c.total as f64,
            per_task: learner.logs.clone(),
        };
        write_json(&out.join("diagnostics.json"), &diagnostics)?;
        write_atomic(&out.join(PLOT_FILE), plot::aa_curve_svg(&[(cfg.ablation.label(), m.per_task_aa.clone())]).as_bytes())?;
        learner.to_checkpoint(echo.as_bytes()).write(&out.join("model.hide"))?;
        Ok(RunSummary { matrix, metrics: m, diagnostics })
    })();
    match &result {
        Ok(_) => status(
            "complete",
            total,
            &["accuracy_matrix.csv", "metrics.json", CONFIG_ECHO, "diagnostics.json", PLOT_FILE, "model.hide"],
            None,
        )?,
        Err(e) => {
            let done = fs::read_to_string(out.join(STATUS_FILE))
                .ok()
                .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
                .and_then(|v| v["completed_tasks"].as_u64())
                .unwrap_or(0) as usize;
            status("failed", done, &[], Some(e.to_string()))?
        }
    }
    result
}

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> CliResult<RunSummary> {
    let dataset = load_dataset(cfg)?;
    let (bb, _) = build_backbone(cfg, &dataset)?;
    run_with_backbone(cfg, Arc::new(bb), &dataset, out)
}

/// Pretrains the configured backbone and writes `backbone.hide`.
pub fn pretrain_command(cfg: &ExperimentConfig, out: &Path) -> CliResult<PretrainReport> {
    let BackboneSection::Transformer { pretrain: Some(_), .. } = &cfg.backbone else {
        return Err(CliError::Config("backbone.pretrain: required by the pretrain subcommand".into()));
    };
    let mut cfg = cfg.clone();
    if let BackboneSection::Transformer { weights, .. } = &mut cfg.backbone {
        *weights = None;
    }
    let dataset = Dataset { train: Vec::new(), test: Vec::new(), classes: 0 };
    let (bb, report) = build_backbone(&cfg, &dataset)?;
    let report = report.expect("pretraining ran");
    fs::create_dir_all(out)?;
    let mut ck = Checkpoint::new();
    for (name, t) in bb.weights().expect("transformer").named_tensors() {
        ck.insert(name, t.clone());
    }
    ck.write(&out.join("backbone.hide"))?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    Ok(report)
}

pub fn ablate_command(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> CliResult<Vec<AblationRow>> {
    let dataset = load_dataset(cfg)?;
    let (bb, _) = build_backbone(cfg, &dataset)?;
    let grid = cfg.ablate.grid.clone().unwrap_or_else(default_grid);
    let rows = run_ablation(Arc::new(bb), &cfg.plan, &cfg.train, &grid, seeds, |s| {
        make_stream(&dataset, cfg.stream.setting, cfg.stream.tasks, s)
    })?;
    fs::create_dir_all(out)?;
    write_json(&out.join("ablation.json"), &rows)?;
    write_atomic(&out.join("ablation.md"), ablation_table(&rows).as_bytes())?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| row | PE | TII | TAP | CR | FAA (mean) | FAA per seed |\n|---|---|---|---|---|---|---|\n");
    let mark = |b: bool| if b { "x" } else { "" };
    for r in rows {
        let per: Vec<String> = r.faa.iter().map(|v| format!("{:.2}", 100.0 * v)).collect();
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.2} | {} |\n",
            r.label,
            mark(r.ablation.pe),
            mark(r.ablation.tii),
            mark(r.ablation.tap),
            mark(r.ablation.cr),
            100.0 * r.mean_faa,
            per.join(" / ")
        ));
    }
    s
}

pub fn theory_command(trials: usize, seed: u64, out: &Path) -> CliResult<TheoryReport> {
    let report = run_theory_checks(trials, seed)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("theory_report.json"), &report)?;
    Ok(report)
}

/// Rebuilds the plot and a summary from `accuracy_matrix.csv` in `dir`.
pub fn report_command(dir: &Path) -> CliResult<String> {
    let csv = dir.join("accuracy_matrix.csv");
    if !csv.is_file() {
        return Err(CliError::Usage(format!("no accuracy_matrix.csv in {}", dir.display())));
    }
    let matrix = AccuracyMatrix::from_csv(&fs::read_to_string(&csv)?)?;
    let m = metrics(&matrix)?;
    let label = fs::read_to_string(dir.join(CONFIG_ECHO))
        .ok()
        .and_then(|s| ExperimentConfig::parse(&s).ok())
        .map_or_else(|| "run".to_string(), |c| c.ablation.label());
    write_atomic(&dir.join(PLOT_FILE), plot::aa_curve_svg(&[(label.clone(), m.per_task_aa.clone())]).as_bytes())?;
    let mut text = format!("# {label}\n\n");
    text.push_str(&format!("FAA {:.2}  CAA {:.2}", 100.0 * m.faa, 100.0 * m.caa));
    if let Some(f) = m.ffm {
        text.push_str(&format!("  FFM {:.2}", 100.0 * f));
    }
    text.push_str("\n\n| after task | AA |\n|---|---|\n");
    for (t, aa) in m.per_task_aa.iter().enumerate() {
        text.push_str(&format!("| {} | {:.2} |\n", t + 1, 100.0 * aa));
    }
    if let Ok(s) = fs::read_to_string(dir.join("ablation.json")) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&s) {
            text.push_str("\n| row | FAA (mean) |\n|---|---|\n");
            for r in v.as_array().into_iter().flatten() {
                text.push_str(&format!("| {} | {:.2} |\n", r["label"].as_str().unwrap_or("?"), 100.0 * r["mean_faa"].as_f64().unwrap_or(f64::NAN)));
            }
        }
    }
    write_atomic(&dir.join("report.md"), text.as_bytes())?;
    Ok(text)
}

#[derive(Parser, Debug)]
#[command(name = "hidecl", version, about = "Continual learning with hierarchical prompt decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the backbone on the auxiliary data and save its weights.
    Pretrain(Common),
    /// Learn the task stream and write the accuracy matrix and metrics.
    Run(Common),
    /// Run every ablation row over the configured seeds.
    Ablate(Common),
    /// Randomized checks of the entropy decomposition and its bounds.
    TheoryCheck {
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Accepted for symmetry with other subcommands; unused.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Regenerate the plot and summary from stored outputs.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("HIDECL_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Config(format!("HIDECL_THREADS: expected a positive integer, got {v:?}")))?;
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_common(c: &Common) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("results"));
    Ok((cfg, out))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Pretrain(c) => {
            let (cfg, out) = load_common(&c)?;
            let r = pretrain_command(&cfg, &out)?;
            println!("pretrained: loss {:.4}, train accuracy {:.2}%", r.final_loss, 100.0 * r.train_accuracy);
        }
        Command::Run(c) => {
            let (cfg, out) = load_common(&c)?;
            let r = run_experiment(&cfg, &out)?;
            print!("{}", metrics_json(&r.metrics));
        }
        Command::Ablate(c) => {
            let (cfg, out) = load_common(&c)?;
            let seeds = c.seed.map_or_else(|| cfg.ablate.seeds.clone(), |s| vec![s]);
            let rows = ablate_command(&cfg, &seeds, &out)?;
            print!("{}", ablation_table(&rows));
        }
        Command::TheoryCheck { trials, seed, out, .. } => {
            let r = theory_command(trials, seed, &out)?;
            for c in &r.checks {
                println!("{:<24} {:>8} trials  max violation {:.3e}  {:?}", c.name, c.trials, c.max_violation, c.verdict);
            }
            if !r.all_pass() {
                return Err(CliError::Run(hide_core::Error::Numeric("a theory check failed".into())));
            }
        }
        Command::Report { config, out } => {
            let dir = match (out, config) {
                (Some(d), _) => d,
                (None, Some(p)) => ExperimentConfig::load(&p)?.output.unwrap_or_else(|| PathBuf::from("results")),
                (None, None) => PathBuf::from("results"),
            };
            print!("{}", report_command(&dir)?);
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
