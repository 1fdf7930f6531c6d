//! Conditional rectified flow: the linear path `x_t = t x1 + (1 - t) x0`
//! from `x0 ~ N(0, I)`, a learned velocity field `u(x, y, t)` with a null
//! condition for classifier-free guidance, and Euler sampling.

mod codec;
mod model;
mod sample;
mod train;

pub use codec::{ConditionCodec, ConditionSpace};
pub use model::{FlowArch, FlowDocument, FlowModel, FLOW_FORMAT_VERSION};
pub use sample::{cfg_combine, cfg_velocity, euler_sample, sample_endpoints};
pub use train::{
    cfm_loss, cfm_loss_grad, interpolate, mask_conditions, train_flow, train_steps, CfmBatch, LogRow, TrainConfig, TrainingLog,
};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::rng::Rng64;

/// Guidance signal attached to a sample; `Null` is the unconditional slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Null,
    Label(usize),
    Value(Vec<f64>),
}

impl Condition {
    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }
}

/// A velocity field over `data_dim`-dimensional states.
pub trait VelocityField: Sync {
    fn data_dim(&self) -> usize;

    /// Velocities at the rows of `x` with per-row times `t`. `cond` holds one
    /// condition per row, or a single condition shared by all rows.
    fn velocity(&self, x: ArrayView2<'_, f64>, t: &[f64], cond: &[Condition]) -> Result<Array2<f64>>;

    /// Guided and unconditional velocities at the same states.
    fn guided_and_null(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        cond: &[Condition],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let guided = self.velocity(x, t, cond)?;
        let null = self.velocity(x, t, &[Condition::Null])?;
        Ok((guided, null))
    }
}

pub(crate) fn check_batch(x: ArrayView2<'_, f64>, data_dim: usize, t: &[f64], cond: &[Condition]) -> Result<()> {
    check_dim("state dimension", data_dim, x.ncols())?;
    check_dim("time count", x.nrows(), t.len())?;
    if cond.len() != 1 {
        check_dim("condition count", x.nrows(), cond.len())?;
    }
    Ok(())
}

pub(crate) fn cond_at(cond: &[Condition], i: usize) -> &Condition {
    if cond.len() == 1 {
        &cond[0]
    } else {
        &cond[i]
    }
}

/// Source of joint `(x, y)` training pairs.
pub trait JointSampler: Sync {
    fn data_dim(&self) -> usize;
    fn condition_space(&self) -> ConditionSpace;
    fn sample_joint(&self, rng: &mut Rng64, n: usize) -> (Array2<f64>, Vec<Condition>);
}

/// Joint distribution that can also be sampled one condition at a time.
pub trait ConditionalSampler: JointSampler {
    fn sample_condition(&self, rng: &mut Rng64) -> Condition;
    fn sample_given(&self, cond: &Condition, rng: &mut Rng64, n: usize) -> Array2<f64>;
}

/// A fixed set of joint samples, drawn from uniformly with replacement.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub cond: Vec<Condition>,
    pub space: ConditionSpace,
}

impl Dataset {
    pub fn from_sampler(sampler: &dyn JointSampler, rng: &mut Rng64, n: usize) -> Self {
        let (x, cond) = sampler.sample_joint(rng, n);
        Self {
            x,
            cond,
            space: sampler.condition_space(),
        }
    }

    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }
}

impl JointSampler for Dataset {
    fn data_dim(&self) -> usize {
        self.x.ncols()
    }

    fn condition_space(&self) -> ConditionSpace {
        self.space.clone()
    }

    fn sample_joint(&self, rng: &mut Rng64, n: usize) -> (Array2<f64>, Vec<Condition>) {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        let x = self.x.select(ndarray::Axis(0), &idx);
        let cond = idx.iter().map(|&i| self.cond[i].clone()).collect();
        (x, cond)
    }
}
