//! Synthetic tasks with known mutual information, an InfoNCE baseline and
//! a benchmark runner that tabulates estimator bias per task.

mod infonce;
mod task;

pub use infonce::{infonce_bound, infonce_estimate, Critic, InfoNceConfig};
pub use task::{default_suite, make_task, sample_pair, MITask, OracleField, TaskSpec, TruthSource};

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{train_flow, ConditionalSampler, Dataset, FlowArch, FlowModel, TrainConfig};
use crate::mi::{mi_estimate, EstimateConfig, EstimatorTag, MIEstimate, XtMode};
use crate::rng::{derive_seed, substream};

pub const BENCH_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub master_seed: u64,
    pub estimators: Vec<EstimatorTag>,
    /// Training pairs for the flow model behind the `rfmi-*` estimators.
    pub n_train: usize,
    pub arch: FlowArch,
    /// Flow training settings. The seed is replaced per task.
    pub train: TrainConfig,
    /// Estimation settings. `mode` and `seed` are replaced per cell.
    pub estimate: EstimateConfig,
    /// InfoNCE settings. The seed is replaced per cell.
    pub infonce: InfoNceConfig,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            estimators: vec![
                EstimatorTag::RfmiDataCoupled,
                EstimatorTag::RfmiTrajectory,
                EstimatorTag::Infonce,
            ],
            n_train: 50_000,
            arch: FlowArch::default(),
            train: TrainConfig {
                iterations: 10_000,
                p_uncond: 0.2,
                ..TrainConfig::default()
            },
            estimate: EstimateConfig {
                n_y: 2000,
                ..EstimateConfig::default()
            },
            infonce: InfoNceConfig::default(),
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub task_id: String,
    pub estimator_tag: EstimatorTag,
    pub estimate: Option<f64>,
    pub stderr: Option<f64>,
    pub true_mi: f64,
    pub bias: Option<f64>,
    pub seed: u64,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: String,
    pub spec: TaskSpec,
    pub true_mi: f64,
    pub truth_source: TruthSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub format_version: u32,
    pub config: BenchConfig,
    pub tasks: Vec<TaskSummary>,
    pub rows: Vec<BenchRow>,
}

/// Seed of the flow model shared by a task's `rfmi-*` cells.
pub fn model_seed(master: u64, task_id: &str) -> u64 {
    derive_seed(master, &format!("{task_id}/flow-model"))
}

/// Seed of one benchmark cell.
pub fn cell_seed(master: u64, task_id: &str, tag: EstimatorTag) -> u64 {
    derive_seed(master, &format!("{task_id}/{tag}"))
}

/// Trains the flow model the `rfmi-*` estimators use on `task`.
pub fn train_task_model(task: &MITask, config: &BenchConfig) -> Result<FlowModel> {
    let seed = model_seed(config.master_seed, &task.task_id);
    let data = Dataset::from_sampler(task, &mut substream(seed, "data"), config.n_train);
    let train = TrainConfig {
        seed,
        ..config.train.clone()
    };
    Ok(train_flow(&data, &config.arch, &train)?.0)
}

fn run_cell(task: &MITask, tag: EstimatorTag, model: Option<&FlowModel>, config: &BenchConfig) -> Result<MIEstimate> {
    let seed = cell_seed(config.master_seed, &task.task_id, tag);
    let est = |mode| EstimateConfig {
        mode,
        seed,
        ..config.estimate.clone()
    };
    let source: &dyn ConditionalSampler = task;
    match tag {
        EstimatorTag::RfmiDataCoupled | EstimatorTag::RfmiTrajectory => {
            let model = model.ok_or_else(|| Error::config("no trained model for an rfmi cell"))?;
            let mode = if tag == EstimatorTag::RfmiDataCoupled {
                XtMode::DataCoupled
            } else {
                XtMode::Trajectory
            };
            mi_estimate(model, source, &est(mode))
        }
        EstimatorTag::RfmiOracle => {
            let oracle = task
                .oracle()
                .ok_or_else(|| Error::config(format!("task {} has no analytic velocity field", task.task_id)))?;
            Ok(mi_estimate(oracle, oracle, &est(XtMode::DataCoupled))?.with_tag(EstimatorTag::RfmiOracle))
        }
        EstimatorTag::Infonce => infonce_estimate(
            task,
            &InfoNceConfig {
                seed,
                ..config.infonce.clone()
            },
        ),
    }
}

fn run_task(task: &MITask, config: &BenchConfig) -> Vec<BenchRow> {
    let needs_model = config
        .estimators
        .iter()
        .any(|t| matches!(t, EstimatorTag::RfmiDataCoupled | EstimatorTag::RfmiTrajectory));
    let started = Instant::now();
    let model = needs_model.then(|| train_task_model(task, config));
    let train_time = started.elapsed().as_secs_f64();

    config
        .estimators
        .iter()
        .map(|&tag| {
            let seed = cell_seed(config.master_seed, &task.task_id, tag);
            let start = Instant::now();
            let uses_model = matches!(tag, EstimatorTag::RfmiDataCoupled | EstimatorTag::RfmiTrajectory);
            let outcome = match (&model, uses_model) {
                (Some(Err(e)), true) => Err(format!("model training failed: {e}")),
                (Some(Ok(m)), true) => run_cell(task, tag, Some(m), config).map_err(|e| e.to_string()),
                _ => run_cell(task, tag, None, config).map_err(|e| e.to_string()),
            };
            // Cells that share the trained model are charged its training time.
            let wall_time_s = start.elapsed().as_secs_f64() + if uses_model { train_time } else { 0.0 };
            match outcome {
                Ok(e) => BenchRow {
                    task_id: task.task_id.clone(),
                    estimator_tag: tag,
                    estimate: Some(e.value),
                    stderr: Some(e.stderr),
                    true_mi: task.true_mi,
                    bias: Some(e.value - task.true_mi),
                    seed,
                    wall_time_s,
                    error: None,
                },
                Err(msg) => BenchRow {
                    task_id: task.task_id.clone(),
                    estimator_tag: tag,
                    estimate: None,
                    stderr: None,
                    true_mi: task.true_mi,
                    bias: None,
                    seed,
                    wall_time_s,
                    error: Some(msg),
                },
            }
        })
        .collect()
}

/// Runs every estimator on every task. Failing cells are recorded with
/// their error message and the run continues.
pub fn run_benchmark(tasks: &[MITask], config: &BenchConfig) -> Result<BenchReport> {
    if tasks.is_empty() {
        return Err(Error::config("benchmark needs at least one task"));
    }
    if config.estimators.is_empty() {
        return Err(Error::config("benchmark needs at least one estimator"));
    }
    let mut ids: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("task ids must be unique"));
    }
    config.train.validate()?;
    config.estimate.validate()?;

    let run = || -> Vec<Vec<BenchRow>> { tasks.par_iter().map(|t| run_task(t, config)).collect() };
    let grouped = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?
            .install(run),
        None => run(),
    };
    Ok(BenchReport {
        format_version: BENCH_FORMAT_VERSION,
        config: config.clone(),
        tasks: tasks
            .iter()
            .map(|t| TaskSummary {
                task_id: t.task_id.clone(),
                spec: t.spec.clone(),
                true_mi: t.true_mi,
                truth_source: t.truth_source,
            })
            .collect(),
        rows: grouped.into_iter().flatten().collect(),
    })
}

impl BenchReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != BENCH_FORMAT_VERSION {
            return Err(Error::Version {
                found,
                expected: BENCH_FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    /// Task-by-estimator bias matrix; failed cells are left empty.
    pub fn write_heatmap_csv(&self, path: &Path) -> Result<()> {
        let mut tags: Vec<EstimatorTag> = Vec::new();
        let mut task_ids: Vec<&str> = Vec::new();
        for row in &self.rows {
            if !tags.contains(&row.estimator_tag) {
                tags.push(row.estimator_tag);
            }
            if !task_ids.contains(&row.task_id.as_str()) {
                task_ids.push(&row.task_id);
            }
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["task_id".to_string()];
        header.extend(tags.iter().map(|t| t.to_string()));
        w.write_record(&header)?;
        for id in task_ids {
            let mut record = vec![id.to_string()];
            for tag in &tags {
                let bias = self
                    .rows
                    .iter()
                    .find(|r| r.task_id == id && r.estimator_tag == *tag)
                    .and_then(|r| r.bias);
                record.push(bias.map(|b| b.to_string()).unwrap_or_default());
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> BenchConfig {
        BenchConfig {
            estimators: vec![EstimatorTag::RfmiOracle],
            estimate: EstimateConfig {
                n_y: 200,
                n_t: 16,
                n_x: 4,
                ..EstimateConfig::default()
            },
            ..BenchConfig::default()
        }
    }

    #[test]
    fn empty_inputs_are_errors() {
        let tasks = default_suite().unwrap();
        assert!(run_benchmark(&[], &quick_config()).is_err());
        let cfg = BenchConfig {
            estimators: vec![],
            ..quick_config()
        };
        assert!(run_benchmark(&tasks, &cfg).is_err());
    }

    #[test]
    fn oracle_cell_is_consistent_and_failures_are_recorded() {
        let tasks = vec![
            make_task("mix", TaskSpec::GaussianMixtureLabel { means: vec![vec![-2.0], vec![2.0]], variance: 1.0, prior: None })
                .unwrap(),
            make_task("cube", TaskSpec::NonlinearTransformedGaussian { rho: vec![0.5] }).unwrap(),
        ];
        let report = run_benchmark(&tasks, &quick_config()).unwrap();
        assert_eq!(report.rows.len(), 2);
        let mix = &report.rows[0];
        let (est, se) = (mix.estimate.unwrap(), mix.stderr.unwrap());
        assert!((est - mix.true_mi).abs() <= 3.0 * se, "{est} ± {se} vs {}", mix.true_mi);
        assert_eq!(mix.bias.unwrap(), est - mix.true_mi);
        let cube = &report.rows[1];
        assert!(cube.estimate.is_none() && cube.error.as_deref().unwrap().contains("analytic"));
    }

    #[test]
    fn reports_round_trip_and_replay() {
        let tasks = vec![make_task("g", TaskSpec::CorrelatedGaussian { rho: vec![0.5] }).unwrap()];
        let a = run_benchmark(&tasks, &quick_config()).unwrap();
        let b = run_benchmark(&tasks, &quick_config()).unwrap();
        assert_eq!(a.rows[0].estimate, b.rows[0].estimate);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        a.write_json(&p).unwrap();
        let back = BenchReport::from_json(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back.rows[0].estimate, a.rows[0].estimate);
        assert_eq!(back.config, a.config);
        a.write_csv(&dir.path().join("r.csv")).unwrap();
        a.write_heatmap_csv(&dir.path().join("h.csv")).unwrap();
        let heat = std::fs::read_to_string(dir.path().join("h.csv")).unwrap();
        assert!(heat.starts_with("task_id,rfmi-oracle\ng,"));
    }

    #[test]
    fn cell_seeds_differ_by_task_and_tag() {
        let a = cell_seed(1, "t", EstimatorTag::Infonce);
        assert_ne!(a, cell_seed(1, "u", EstimatorTag::Infonce));
        assert_ne!(a, cell_seed(1, "t", EstimatorTag::RfmiOracle));
        assert_ne!(a, cell_seed(2, "t", EstimatorTag::Infonce));
    }
}
