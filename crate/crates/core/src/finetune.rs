//! MI-guided self-supervised fine-tuning: generate a pool of samples per
//! condition, score each by point-wise MI during generation, keep the top
//! `k`, and continue flow-matching training on the kept pairs.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    euler_sample, train_steps, Condition, ConditionSpace, Dataset, FlowModel, TrainConfig, TrainingLog, VelocityField,
};
use crate::mi::{pointwise_mi_batch, AnalyticGaussianTask, PointwiseConfig};
use crate::nn::AdamWConfig;
use crate::rng::{indexed_stream, standard_normal, substream, Rng64};

pub const FINETUNE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Pool size per condition and pass.
    pub m: usize,
    /// Samples kept per condition and pass.
    pub k: usize,
    /// Independent generate-and-select rounds over the condition set.
    pub passes: usize,
    pub pointwise: PointwiseConfig,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            m: 50,
            k: 1,
            passes: 2,
            pointwise: PointwiseConfig::default(),
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if self.k > self.m {
            return Err(Error::config(format!("k ({}) must not exceed the pool size m ({})", self.k, self.m)));
        }
        if self.passes == 0 {
            return Err(Error::config("passes must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneEntry {
    pub condition: Condition,
    pub sample: Vec<f64>,
    pub pointwise_mi: f64,
    /// Position of the sample within its pool.
    pub generation_index: usize,
}

/// One pool: every score generated for a condition in a pass and the kept entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSelection {
    pub condition: Condition,
    pub pass: usize,
    /// Stream index the pool's sources were drawn from.
    pub stream: u64,
    pub pool_mi: Vec<f64>,
    pub selected: Vec<FineTuneEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneSet {
    pub format_version: u32,
    pub m: usize,
    pub k: usize,
    pub passes: usize,
    pub seed: u64,
    pub pools: Vec<PoolSelection>,
}

impl FineTuneSet {
    pub fn entries(&self) -> impl Iterator<Item = &FineTuneEntry> {
        self.pools.iter().flat_map(|p| p.selected.iter())
    }

    pub fn len(&self) -> usize {
        self.entries().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every kept score is at least every discarded score of its pool.
    pub fn selection_dominates(&self) -> bool {
        self.pools.iter().all(|p| {
            let kept: Vec<usize> = p.selected.iter().map(|e| e.generation_index).collect();
            let min_kept = p.selected.iter().map(|e| e.pointwise_mi).fold(f64::INFINITY, f64::min);
            p.pool_mi
                .iter()
                .enumerate()
                .filter(|(j, _)| !kept.contains(j))
                .all(|(_, &v)| v <= min_kept)
        })
    }

    /// Kept pairs as training data.
    pub fn to_dataset(&self, space: ConditionSpace) -> Result<Dataset> {
        let entries: Vec<&FineTuneEntry> = self.entries().collect();
        let dim = entries
            .first()
            .map(|e| e.sample.len())
            .ok_or_else(|| Error::config("fine-tuning set is empty"))?;
        let mut x = Array2::zeros((entries.len(), dim));
        for (mut row, e) in x.rows_mut().into_iter().zip(&entries) {
            if e.sample.len() != dim {
                return Err(Error::Dimension {
                    context: "fine-tuning sample",
                    expected: dim,
                    got: e.sample.len(),
                });
            }
            row.assign(&ArrayView1::from(&e.sample[..]));
        }
        Ok(Dataset {
            x,
            cond: entries.iter().map(|e| e.condition.clone()).collect(),
            space,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FINETUNE_FORMAT_VERSION {
            return Err(Error::Version {
                found,
                expected: FINETUNE_FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Each label of a `count`-label space repeated `repeats` times.
pub fn label_prompts(count: usize, repeats: usize) -> Vec<Condition> {
    (0..repeats).flat_map(|_| (0..count).map(Condition::Label)).collect()
}

/// Generates `m` samples per condition and pass with fused point-wise MI
/// scoring, keeping the top `k` of each pool.
pub fn build_finetune_set(
    field: &(impl VelocityField + ?Sized),
    conditions: &[Condition],
    config: &SelectionConfig,
) -> Result<FineTuneSet> {
    config.validate()?;
    if conditions.is_empty() {
        return Err(Error::config("condition set is empty"));
    }
    let jobs: Vec<(usize, usize)> = (0..config.passes)
        .flat_map(|p| (0..conditions.len()).map(move |i| (p, i)))
        .collect();
    let pools = jobs
        .par_iter()
        .map(|&(pass, i)| {
            let cond = &conditions[i];
            let stream = (pass * conditions.len() + i) as u64;
            let mut rng = indexed_stream(config.seed, "finetune-pool", stream);
            let x0 = standard_normal(&mut rng, config.m, field.data_dim());
            let batch = pointwise_mi_batch(field, cond, x0, &config.pointwise).map_err(|e| {
                let sample = match e {
                    Error::NonFinite { index, .. } => index % config.m,
                    _ => 0,
                };
                Error::Generation {
                    condition: format!("{cond:?} (pass {pass}, position {i})"),
                    sample,
                    source: Box::new(e),
                }
            })?;
            let selected = top_k(&batch.mi, config.k)
                .into_iter()
                .map(|j| FineTuneEntry {
                    condition: cond.clone(),
                    sample: batch.endpoints.row(j).to_vec(),
                    pointwise_mi: batch.mi[j],
                    generation_index: j,
                })
                .collect();
            Ok(PoolSelection {
                condition: cond.clone(),
                pass,
                stream,
                pool_mi: batch.mi,
                selected,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FineTuneSet {
        format_version: FINETUNE_FORMAT_VERSION,
        m: config.m,
        k: config.k,
        passes: config.passes,
        seed: config.seed,
        pools,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Defaults to a tenth of the pre-training rate.
    pub optimizer: AdamWConfig,
    pub warmup_steps: usize,
    pub ema_decay: Option<f64>,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            iterations: 2000,
            batch_size: base.batch_size,
            optimizer: AdamWConfig {
                lr: 0.1 * base.optimizer.lr,
                ..base.optimizer
            },
            warmup_steps: base.warmup_steps,
            ema_decay: base.ema_decay,
            seed: 0,
        }
    }
}

/// Continues flow-matching training on the set's pairs and returns a new
/// model; `model` itself is never modified. Zero iterations or a zero
/// learning rate return an exact copy.
pub fn finetune(model: &FlowModel, set: &FineTuneSet, config: &FineTuneConfig) -> Result<(FlowModel, TrainingLog)> {
    let data = set.to_dataset(model.condition_space().clone())?;
    let mut tuned = model.clone();
    let mut log = TrainingLog::default();
    if config.iterations == 0 || config.optimizer.lr == 0.0 {
        return Ok((tuned, log));
    }
    let train = TrainConfig {
        batch_size: config.batch_size,
        iterations: config.iterations,
        optimizer: config.optimizer,
        warmup_steps: config.warmup_steps,
        p_uncond: model.p_uncond(),
        ema_decay: config.ema_decay,
        seed: config.seed,
    };
    let mut rng = substream(config.seed, "finetune-train");
    train_steps(&mut tuned, &data, &train, &mut rng, &mut log)?;
    Ok((tuned, log))
}

/// Something that produces samples for a condition.
pub trait Generator: Sync {
    fn generate(&self, cond: &Condition, n: usize, rng: &mut Rng64) -> Result<Array2<f64>>;
}

/// Euler sampling from a velocity field with guidance scale `w`.
pub struct FlowGenerator<'a, F: ?Sized> {
    pub field: &'a F,
    pub steps: usize,
    pub w: f64,
}

impl<F: VelocityField + ?Sized> Generator for FlowGenerator<'_, F> {
    fn generate(&self, cond: &Condition, n: usize, rng: &mut Rng64) -> Result<Array2<f64>> {
        let x0 = standard_normal(rng, n, self.field.data_dim());
        euler_sample(self.field, x0, std::slice::from_ref(cond), self.steps, self.w)
    }
}

/// Exact conditional sampling from the task itself.
impl Generator for AnalyticGaussianTask {
    fn generate(&self, cond: &Condition, n: usize, rng: &mut Rng64) -> Result<Array2<f64>> {
        use crate::flow::ConditionalSampler;
        Ok(self.sample_given(cond, rng, n))
    }
}

/// Mean over labels and generated samples of the closed-form posterior
/// probability of the conditioning label.
pub fn alignment_metric(
    generator: &dyn Generator,
    task: &AnalyticGaussianTask,
    n_per_label: usize,
    rng: &mut Rng64,
) -> Result<f64> {
    if n_per_label == 0 {
        return Err(Error::config("n_per_label must be positive"));
    }
    let labels = task.num_labels();
    let mut total = 0.0;
    for y in 0..labels {
        let x = generator.generate(&Condition::Label(y), n_per_label, rng)?;
        total += x.rows().into_iter().map(|row| task.posterior(row)[y]).sum::<f64>() / n_per_label as f64;
    }
    Ok(total / labels as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub n_per_label: usize,
    pub steps: usize,
    /// Guidance scale used when sampling for evaluation.
    pub w: f64,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            n_per_label: 2000,
            steps: 100,
            w: 4.5,
            seed: 0,
        }
    }
}

/// Alignment before and after fine-tuning, in the form of a summary row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub before: f64,
    pub after: f64,
    pub abs_difference: f64,
    /// `100 (after - before) / before`.
    pub relative_gain_pct: f64,
}

impl AlignmentSummary {
    pub fn new(before: f64, after: f64) -> Self {
        Self {
            before,
            after,
            abs_difference: after - before,
            relative_gain_pct: 100.0 * (after - before) / before,
        }
    }
}

/// Scores a model with the same sources for every call at a given config.
pub fn model_alignment(model: &FlowModel, task: &AnalyticGaussianTask, config: &AlignmentConfig) -> Result<f64> {
    let generator = FlowGenerator {
        field: model,
        steps: config.steps,
        w: config.w,
    };
    alignment_metric(&generator, task, config.n_per_label, &mut substream(config.seed, "alignment"))
}

/// Settings for the full select, fine-tune and evaluate pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Each label appears this many times in the condition set.
    pub prompts_per_label: usize,
    pub selection: SelectionConfig,
    pub finetune: FineTuneConfig,
    pub alignment: AlignmentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prompts_per_label: 50,
            selection: SelectionConfig::default(),
            finetune: FineTuneConfig::default(),
            alignment: AlignmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub set: FineTuneSet,
    pub model: FlowModel,
    pub log: TrainingLog,
    pub summary: AlignmentSummary,
}

/// Builds the fine-tuning set from `model`, fine-tunes a copy and scores
/// both models with identical evaluation sources.
pub fn run_pipeline(model: &FlowModel, task: &AnalyticGaussianTask, config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.selection.validate()?;
    if config.prompts_per_label == 0 {
        return Err(Error::config("prompts_per_label must be positive"));
    }
    let conditions = label_prompts(task.num_labels(), config.prompts_per_label);
    let set = build_finetune_set(model, &conditions, &config.selection)?;
    let (tuned, log) = finetune(model, &set, &config.finetune)?;
    let before = model_alignment(model, task, &config.alignment)?;
    let after = model_alignment(&tuned, task, &config.alignment)?;
    Ok(PipelineOutcome {
        set,
        model: tuned,
        log,
        summary: AlignmentSummary::new(before, after),
    })
}
