use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{FlowArch, FlowModel};
use super::{JointSampler, VelocityField};
use crate::error::{check_dim, Error, Result};
use crate::flow::Condition;
use crate::nn::{AdamW, AdamWConfig};
use crate::rng::{standard_normal, substream, Rng64};

const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: AdamWConfig,
    /// Linear warmup length; the rate is constant afterwards.
    pub warmup_steps: usize,
    pub p_uncond: f64,
    /// Decay of an exponential moving average of the parameters. When set,
    /// the averaged parameters are what training returns.
    pub ema_decay: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            iterations: 4000,
            optimizer: AdamWConfig::default(),
            warmup_steps: 400,
            p_uncond: 0.1,
            ema_decay: Some(0.999),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::config(format!("p_uncond must lie in [0, 1), got {}", self.p_uncond)));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config(format!("ema_decay must lie in [0, 1), got {d}")));
            }
        }
        self.optimizer.validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.optimizer.lr;
        if self.warmup_steps == 0 {
            base
        } else {
            base * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// Means over consecutive non-overlapping windows.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.losses()
            .chunks(window)
            .filter(|c| c.len() == window)
            .map(|c| c.iter().sum::<f64>() / window as f64)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A CFM minibatch. Conditions are unmasked; masking happens per use.
#[derive(Clone, Debug)]
pub struct CfmBatch {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub cond: Vec<Condition>,
    pub t: Vec<f64>,
}

impl CfmBatch {
    fn validate(&self) -> Result<()> {
        check_dim("x1 rows", self.x0.nrows(), self.x1.nrows())?;
        check_dim("x1 cols", self.x0.ncols(), self.x1.ncols())?;
        check_dim("time count", self.x0.nrows(), self.t.len())?;
        check_dim("condition count", self.x0.nrows(), self.cond.len())?;
        if let Some(&t) = self.t.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return Err(Error::Domain(format!("training time must lie in [0, 1), got {t}")));
        }
        Ok(())
    }
}

/// Points on the linear path, `t x1 + (1 - t) x0` row by row.
pub fn interpolate(x0: ArrayView2<'_, f64>, x1: ArrayView2<'_, f64>, t: &[f64]) -> Array2<f64> {
    let mut out = x1.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let ti = t[i];
        Zip::from(&mut row).and(x0.row(i)).for_each(|a, &b| *a = ti * *a + (1.0 - ti) * b);
    }
    out
}

/// Replaces each condition by `Null` with probability `p`; returns the count.
pub fn mask_conditions(cond: &mut [Condition], p: f64, rng: &mut impl Rng) -> usize {
    let mut masked = 0;
    for c in cond.iter_mut() {
        if rng.random::<f64>() < p {
            *c = Condition::Null;
            masked += 1;
        }
    }
    masked
}

fn squared_error(pred: ArrayView2<'_, f64>, target: &Array2<f64>, scale: f64) -> (Vec<f64>, Array2<f64>) {
    let diff = &pred - target;
    let terms = diff.rows().into_iter().map(|r| r.dot(&r) * scale).collect();
    (terms, diff * (2.0 * scale))
}

/// Mean over the batch of `|u(x_t, y, t) - (x1 - x0)|^2`, with each
/// condition masked to null with probability `p_uncond`.
pub fn cfm_loss(field: &(impl VelocityField + ?Sized), batch: &CfmBatch, p_uncond: f64, rng: &mut impl Rng) -> Result<f64> {
    batch.validate()?;
    let mut cond = batch.cond.clone();
    mask_conditions(&mut cond, p_uncond, rng);
    let xt = interpolate(batch.x0.view(), batch.x1.view(), &batch.t);
    let target = &batch.x1 - &batch.x0;
    let pred = field.velocity(xt.view(), &batch.t, &cond)?;
    let n = batch.t.len() as f64;
    let (terms, _) = squared_error(pred.view(), &target, 1.0 / n);
    if let Some(index) = terms.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "cfm loss", index });
    }
    Ok(terms.iter().sum())
}

/// CFM loss and its flat gradient on an already-masked batch.
pub fn cfm_loss_grad(model: &FlowModel, batch: &CfmBatch) -> Result<(f64, Vec<f64>)> {
    batch.validate()?;
    let xt = interpolate(batch.x0.view(), batch.x1.view(), &batch.t);
    let target = &batch.x1 - &batch.x0;
    let n = batch.t.len() as f64;
    model.regression_grad(xt.view(), &batch.t, &batch.cond, |pred| {
        squared_error(pred, &target, 1.0 / n)
    })
}

fn draw_batch(sampler: &dyn JointSampler, batch_size: usize, rng: &mut Rng64) -> CfmBatch {
    let (x1, cond) = sampler.sample_joint(rng, batch_size);
    let x0 = standard_normal(rng, batch_size, x1.ncols());
    let t = (0..batch_size).map(|_| rng.random::<f64>()).collect();
    CfmBatch { x0, x1, cond, t }
}

/// Runs `config.iterations` CFM steps on `model` in place, appending to `log`.
/// On divergence `model` is left at its last finite state.
pub fn train_steps(
    model: &mut FlowModel,
    sampler: &dyn JointSampler,
    config: &TrainConfig,
    rng: &mut Rng64,
    log: &mut TrainingLog,
) -> Result<()> {
    config.validate()?;
    check_dim("sampler dimension", model.data_dim(), sampler.data_dim())?;
    let mut opt = AdamW::new(config.optimizer, model.num_params())?;
    let mut params = model.flat_params();
    let mut ema = config.ema_decay.map(|_| params.clone());
    let start = Instant::now();
    let first = log.rows.len();

    for step in 0..config.iterations {
        let mut batch = draw_batch(sampler, config.batch_size, rng);
        mask_conditions(&mut batch.cond, config.p_uncond, rng);
        let diverged = |log: &TrainingLog, loss: Option<f64>| {
            let mut last: Vec<f64> = log.rows[first..].iter().rev().take(10).map(|r| r.loss).collect();
            last.reverse();
            if let Some(l) = loss {
                last.push(l);
                if last.len() > 10 {
                    last.remove(0);
                }
            }
            Error::Diverged {
                iteration: step,
                last_losses: last,
            }
        };
        let (loss, grads) = match cfm_loss_grad(model, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(diverged(log, Some(f64::NAN))),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(diverged(log, Some(loss)));
        }
        let lr = config.lr_at(step);
        if let Err(e) = opt.step_with_lr(&mut params, &grads, lr) {
            return Err(if e.is_numerical() { diverged(log, Some(loss)) } else { e });
        }
        model.set_flat_params(&params)?;
        if let (Some(avg), Some(decay)) = (ema.as_mut(), config.ema_decay) {
            // Short memory early so the average does not drag the initialization along.
            let d = decay.min((1 + step) as f64 / (10 + step) as f64);
            for (a, &p) in avg.iter_mut().zip(&params) {
                *a = d * *a + (1.0 - d) * p;
            }
        }
        log.rows.push(LogRow {
            iteration: step,
            loss,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    if let Some(avg) = ema {
        model.set_flat_params(&avg)?;
    }
    Ok(())
}

/// Trains a fresh model. Initialization and batches come from the
/// `flow-init` and `flow-train` substreams of `config.seed`.
pub fn train_flow(
    sampler: &dyn JointSampler,
    arch: &FlowArch,
    config: &TrainConfig,
) -> Result<(FlowModel, TrainingLog)> {
    config.validate()?;
    let mut init = substream(config.seed, "flow-init");
    let mut model = FlowModel::new(
        arch,
        sampler.condition_space(),
        sampler.data_dim(),
        config.p_uncond,
        &mut init,
    )?;
    let mut rng = substream(config.seed, "flow-train");
    let mut log = TrainingLog::default();
    train_steps(&mut model, sampler, config, &mut rng, &mut log)?;
    Ok((model, log))
}
