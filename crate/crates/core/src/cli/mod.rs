//! Command-line front end. Every command reads a strict JSON config, writes
//! its outputs plus `resolved_config.json` into `--out`, and can be replayed
//! exactly from that snapshot.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{default_suite, make_task, run_benchmark, BenchConfig, BenchReport, MITask, TaskSpec};
use crate::error::{Error, Result};
use crate::finetune::{run_pipeline, PipelineConfig};
use crate::flow::{train_flow, ConditionalSampler, Dataset, FlowArch, FlowModel, TrainConfig};
use crate::mi::{mi_estimate, EstimateConfig, EstimatorTag, XtMode};
use crate::rng::{derive_seed, substream};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(name = "rfmi", version, about = "Mutual information estimation with rectified flows")]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "RFMI_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a conditional flow on a synthetic task.
    Train(RunArgs),
    /// Estimate I(X; Y) with a trained model or the task's analytic field.
    Estimate {
        #[command(flatten)]
        run: RunArgs,
        /// How X_t is drawn.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Run estimators over a task suite and write the bias report.
    Benchmark(RunArgs),
    /// Select samples by point-wise MI, fine-tune, and score alignment.
    Finetune(RunArgs),
    /// Summarize a benchmark report.
    Report {
        /// A `report.json` written by `benchmark`.
        #[arg(long)]
        input: PathBuf,
        /// Directory for the heatmap and summary; stdout only if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    DataCoupled,
    Trajectory,
}

impl From<ModeArg> for XtMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::DataCoupled => XtMode::DataCoupled,
            ModeArg::Trajectory => XtMode::Trajectory,
        }
    }
}

fn default_n_train() -> usize {
    50_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub format_version: u32,
    pub task: TaskSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default)]
    pub arch: FlowArch,
    /// Its seed is derived from `seed`.
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateRunConfig {
    pub format_version: u32,
    pub task: TaskSpec,
    /// Trained model file; the task's analytic field is used when absent.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Its seed is derived from `seed`.
    #[serde(default)]
    pub estimate: EstimateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTask {
    pub task_id: String,
    pub spec: TaskSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkRunConfig {
    pub format_version: u32,
    /// The built-in six-task suite when absent.
    #[serde(default)]
    pub tasks: Option<Vec<NamedTask>>,
    #[serde(default)]
    pub seed: u64,
    /// Its master seed is `seed`.
    #[serde(default)]
    pub bench: BenchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRunConfig {
    pub format_version: u32,
    /// Pre-trained model file.
    pub model: PathBuf,
    /// Must be a `gaussian-mixture-label` task.
    pub task: TaskSpec,
    #[serde(default)]
    pub seed: u64,
    /// Its seeds are derived from `seed`.
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(CONFIG_FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::config(format!(
                "format_version {v} is not supported (expected {CONFIG_FORMAT_VERSION})"
            )))
        }
        None => return Err(Error::config("missing field `format_version`")),
    }
    serde_json::from_value(value).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Resolves seeds for a train run.
pub fn resolve_train(mut cfg: TrainRunConfig, seed: Option<u64>) -> TrainRunConfig {
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.train.seed = derive_seed(cfg.seed, "train");
    cfg
}

pub fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = resolve_train(read_config(&args.config)?, args.seed);
    cfg.train.validate()?;
    let task = make_task("train", cfg.task.clone())?;
    prepare_out(&args.out)?;
    write_json(&args.out.join(RESOLVED_CONFIG), &cfg)?;
    let data = Dataset::from_sampler(&task, &mut substream(cfg.seed, "data"), cfg.n_train);
    let (model, log) = train_flow(&data, &cfg.arch, &cfg.train)?;
    model.save(&args.out.join("model.json"), Some(cfg.seed))?;
    log.write_csv(&args.out.join("train_log.csv"))?;
    let last = log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("trained {} iterations, final loss {last:.6}", log.rows.len());
    Ok(())
}

pub fn resolve_estimate(mut cfg: EstimateRunConfig, seed: Option<u64>, mode: Option<XtMode>) -> EstimateRunConfig {
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.estimate.seed = derive_seed(cfg.seed, "estimate");
    if let Some(m) = mode {
        cfg.estimate.mode = m;
    }
    cfg
}

#[derive(Clone, Debug, Serialize)]
struct EstimateRecord {
    task_family: &'static str,
    estimator_tag: EstimatorTag,
    value: f64,
    stderr: f64,
    true_mi: f64,
    n_y: usize,
    n_t: usize,
    n_x: usize,
    seed: u64,
    wall_time_s: f64,
}

pub fn cmd_estimate(args: &RunArgs, mode: Option<XtMode>) -> Result<()> {
    let cfg = resolve_estimate(read_config(&args.config)?, args.seed, mode);
    cfg.estimate.validate()?;
    let task = make_task("estimate", cfg.task.clone())?;
    let model = cfg.model.as_deref().map(FlowModel::load).transpose()?;
    prepare_out(&args.out)?;
    write_json(&args.out.join(RESOLVED_CONFIG), &cfg)?;
    let source: &dyn ConditionalSampler = &task;
    let estimate = match &model {
        Some(m) => mi_estimate(m, source, &cfg.estimate)?,
        None => {
            let oracle = task
                .oracle()
                .ok_or_else(|| Error::config("task has no analytic velocity field; provide `model`"))?;
            mi_estimate(oracle, oracle, &cfg.estimate)?.with_tag(EstimatorTag::RfmiOracle)
        }
    };
    let record = EstimateRecord {
        task_family: cfg.task.family(),
        estimator_tag: estimate.estimator_tag,
        value: estimate.value,
        stderr: estimate.stderr,
        true_mi: task.true_mi,
        n_y: estimate.n_y,
        n_t: estimate.n_t,
        n_x: estimate.n_x,
        seed: estimate.seed,
        wall_time_s: estimate.wall_time_s,
    };
    write_json(&args.out.join("estimate.json"), &record)?;
    write_csv_rows(&args.out.join("estimate.csv"), std::slice::from_ref(&record))?;
    println!(
        "{}: {:.6} ± {:.6} nats (true {:.6})",
        record.estimator_tag, record.value, record.stderr, record.true_mi
    );
    Ok(())
}

pub fn resolve_benchmark(mut cfg: BenchmarkRunConfig, seed: Option<u64>, workers: Option<usize>) -> BenchmarkRunConfig {
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.bench.master_seed = cfg.seed;
    if workers.is_some() {
        cfg.bench.workers = workers;
    }
    cfg
}

fn benchmark_tasks(cfg: &BenchmarkRunConfig) -> Result<Vec<MITask>> {
    match &cfg.tasks {
        None => default_suite(),
        Some(list) => list.iter().map(|t| make_task(t.task_id.clone(), t.spec.clone())).collect(),
    }
}

pub fn cmd_benchmark(args: &RunArgs, workers: Option<usize>) -> Result<()> {
    let cfg = resolve_benchmark(read_config(&args.config)?, args.seed, workers);
    let tasks = benchmark_tasks(&cfg)?;
    prepare_out(&args.out)?;
    write_json(&args.out.join(RESOLVED_CONFIG), &cfg)?;
    let report = run_benchmark(&tasks, &cfg.bench)?;
    report.write_csv(&args.out.join("report.csv"))?;
    report.write_json(&args.out.join("report.json"))?;
    report.write_heatmap_csv(&args.out.join("heatmap.csv"))?;
    print_report(&report);
    Ok(())
}

pub fn resolve_finetune(mut cfg: FinetuneRunConfig, seed: Option<u64>) -> FinetuneRunConfig {
    cfg.seed = seed.unwrap_or(cfg.seed);
    let p = &mut cfg.pipeline;
    p.selection.seed = derive_seed(cfg.seed, "selection");
    p.finetune.seed = derive_seed(cfg.seed, "finetune");
    p.alignment.seed = derive_seed(cfg.seed, "alignment");
    cfg
}

pub fn cmd_finetune(args: &RunArgs) -> Result<()> {
    let cfg = resolve_finetune(read_config(&args.config)?, args.seed);
    cfg.pipeline.selection.validate()?;
    let task = make_task("finetune", cfg.task.clone())?;
    let mixture = task
        .mixture()
        .ok_or_else(|| Error::config("fine-tuning needs a `gaussian-mixture-label` task"))?;
    let model = FlowModel::load(&cfg.model)?;
    prepare_out(&args.out)?;
    write_json(&args.out.join(RESOLVED_CONFIG), &cfg)?;
    let outcome = run_pipeline(&model, mixture, &cfg.pipeline)?;
    outcome.set.save(&args.out.join("finetune_set.json"))?;
    outcome.model.save(&args.out.join("model.json"), Some(cfg.seed))?;
    outcome.log.write_csv(&args.out.join("finetune_log.csv"))?;
    write_json(&args.out.join("alignment.json"), &outcome.summary)?;
    write_csv_rows(&args.out.join("alignment.csv"), std::slice::from_ref(&outcome.summary))?;
    let s = &outcome.summary;
    println!(
        "alignment before {:.6} after {:.6} abs. difference {:+.6} relative gain {:+.3}%",
        s.before, s.after, s.abs_difference, s.relative_gain_pct
    );
    Ok(())
}

fn print_report(report: &BenchReport) {
    println!("{:<20} {:<18} {:>10} {:>10} {:>10} {:>10}", "task", "estimator", "estimate", "stderr", "true", "bias");
    for r in &report.rows {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<20} {:<18} {:>10} {:>10} {:>10.4} {:>10}{}",
            r.task_id,
            r.estimator_tag.to_string(),
            fmt(r.estimate),
            fmt(r.stderr),
            r.true_mi,
            fmt(r.bias),
            r.error.as_deref().map(|e| format!("  ({e})")).unwrap_or_default()
        );
    }
}

pub fn cmd_report(input: &Path, out: Option<&Path>) -> Result<()> {
    let report = BenchReport::from_json(&fs::read_to_string(input)?)?;
    print_report(&report);
    if let Some(dir) = out {
        prepare_out(dir)?;
        report.write_heatmap_csv(&dir.join("heatmap.csv"))?;
        report.write_csv(&dir.join("report.csv"))?;
    }
    Ok(())
}

/// Dispatches a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::config("--workers must be positive"));
        }
        // Fails only if the pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Estimate { run, mode } => cmd_estimate(run, mode.map(Into::into)),
        Command::Benchmark(a) => cmd_benchmark(a, cli.workers),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Report { input, out } => cmd_report(input, out.as_deref()),
    }
}

/// Process exit code for an error: 2 for bad input, 3 for numerical failure.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        return 3;
    }
    match err {
        Error::Io(_) => 1,
        _ => 2,
    }
}
