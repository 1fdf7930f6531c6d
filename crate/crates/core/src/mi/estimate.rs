use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{cfg_combine, cfg_velocity, interpolate, Condition, ConditionalSampler, VelocityField};
use crate::rng::{indexed_stream, standard_normal, Rng64};
use crate::timesampling::{TailWeight, TimeSampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorTag {
    RfmiDataCoupled,
    RfmiTrajectory,
    RfmiOracle,
    Infonce,
}

impl EstimatorTag {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorTag::RfmiDataCoupled => "rfmi-data-coupled",
            EstimatorTag::RfmiTrajectory => "rfmi-trajectory",
            EstimatorTag::RfmiOracle => "rfmi-oracle",
            EstimatorTag::Infonce => "infonce",
        }
    }
}

impl std::fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rfmi-data-coupled" => Ok(Self::RfmiDataCoupled),
            "rfmi-trajectory" => Ok(Self::RfmiTrajectory),
            "rfmi-oracle" => Ok(Self::RfmiOracle),
            "infonce" => Ok(Self::Infonce),
            other => Err(Error::config(format!("unknown estimator `{other}`"))),
        }
    }
}

/// An MI estimate in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_y: usize,
    pub n_t: usize,
    pub n_x: usize,
    pub seed: u64,
    pub wall_time_s: f64,
    pub estimator_tag: EstimatorTag,
}

impl MIEstimate {
    pub fn with_tag(mut self, tag: EstimatorTag) -> Self {
        self.estimator_tag = tag;
        self
    }
}

/// Where `X_t` comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XtMode {
    /// `t x1 + (1 - t) x0` with `x1 ~ p(x | y)` from the data source.
    #[default]
    DataCoupled,
    /// State at time `t` of the model's own Euler trajectory from `N(0, I)`.
    Trajectory,
}

/// How `t` is drawn for the time integral.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScheme {
    #[default]
    Importance,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub n_y: usize,
    pub n_t: usize,
    pub n_x: usize,
    pub t_eps: f64,
    /// Guidance scale for the guided velocity (1 = plain conditional).
    pub w: f64,
    pub mode: XtMode,
    pub time_scheme: TimeScheme,
    pub tail: TailWeight,
    /// Euler steps over `[0, 1]` in trajectory mode.
    pub steps: usize,
    pub seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            n_y: 500,
            n_t: 64,
            n_x: 8,
            t_eps: 0.99,
            w: 1.0,
            mode: XtMode::DataCoupled,
            time_scheme: TimeScheme::Importance,
            tail: TailWeight::Frozen,
            steps: 100,
            seed: 0,
        }
    }
}

impl EstimateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n_y", self.n_y), ("n_t", self.n_t), ("n_x", self.n_x), ("steps", self.steps)] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.w >= 0.0) {
            return Err(Error::config(format!("w must be non-negative, got {}", self.w)));
        }
        TimeSampler::new(self.t_eps)?;
        Ok(())
    }

    pub fn tag(&self) -> EstimatorTag {
        match self.mode {
            XtMode::DataCoupled => EstimatorTag::RfmiDataCoupled,
            XtMode::Trajectory => EstimatorTag::RfmiTrajectory,
        }
    }
}

/// `u_y . (u_y - u_null)` per row, with `u_y` guided at scale `w`.
fn integrand(field: &(impl VelocityField + ?Sized), x: &Array2<f64>, t: &[f64], cond: &Condition, w: f64) -> Result<Vec<f64>> {
    let (guided, null) = field.guided_and_null(x.view(), t, std::slice::from_ref(cond))?;
    let guided = cfg_combine(guided, null.clone(), w);
    Ok(guided
        .rows()
        .into_iter()
        .zip(null.rows())
        .map(|(g, n)| g.iter().zip(n).map(|(gi, ni)| gi * (gi - ni)).sum())
        .collect())
}

struct TimeDraw {
    t: f64,
    weight: f64,
}

fn draw_times(config: &EstimateConfig, sampler: &TimeSampler, rng: &mut Rng64) -> Vec<TimeDraw> {
    (0..config.n_t)
        .map(|_| match config.time_scheme {
            TimeScheme::Importance => {
                let t = sampler.sample(rng).min(1.0 - f64::EPSILON);
                TimeDraw {
                    t,
                    weight: sampler.importance_weight(t, config.tail),
                }
            }
            TimeScheme::Uniform => {
                let t: f64 = rng.random();
                let weight = match config.tail {
                    TailWeight::Exact => t / (1.0 - t),
                    TailWeight::Frozen => sampler.frozen_ratio(t),
                };
                TimeDraw { t, weight }
            }
        })
        .collect()
}

fn data_coupled_term(
    field: &(impl VelocityField + ?Sized),
    source: &dyn ConditionalSampler,
    cond: &Condition,
    times: &[TimeDraw],
    config: &EstimateConfig,
    rng: &mut Rng64,
) -> Result<f64> {
    let rows = times.len() * config.n_x;
    let x1 = source.sample_given(cond, rng, rows);
    let x0 = standard_normal(rng, rows, field.data_dim());
    let t: Vec<f64> = times.iter().flat_map(|d| std::iter::repeat_n(d.t, config.n_x)).collect();
    let xt = interpolate(x0.view(), x1.view(), &t);
    let values = integrand(field, &xt, &t, cond, config.w)?;
    let total: f64 = values
        .chunks(config.n_x)
        .zip(times)
        .map(|(chunk, d)| d.weight * chunk.iter().sum::<f64>())
        .sum();
    Ok(total / rows as f64)
}

fn trajectory_term(
    field: &(impl VelocityField + ?Sized),
    cond: &Condition,
    times: &mut [TimeDraw],
    config: &EstimateConfig,
    rng: &mut Rng64,
) -> Result<f64> {
    times.sort_by(|a, b| a.t.total_cmp(&b.t));
    let dt = 1.0 / config.steps as f64;
    let n = config.n_x;
    let cond_slice = std::slice::from_ref(cond);
    let mut x = standard_normal(rng, n, field.data_dim());
    let mut now = 0.0;
    let mut total = 0.0;
    for (j, draw) in times.iter().enumerate() {
        while draw.t - now > 1e-15 {
            let h = dt.min(draw.t - now);
            let u = cfg_velocity(field, x.view(), &vec![now; n], cond_slice, config.w)?;
            x.scaled_add(h, &u);
            now += h;
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "trajectory state",
                index: j * x.len() + index,
            });
        }
        let values = integrand(field, &x, &vec![draw.t; n], cond, config.w)?;
        total += draw.weight * values.iter().sum::<f64>();
    }
    Ok(total / (times.len() * n) as f64)
}

/// Monte Carlo estimate of `I(X; Y)` from a guided/unconditional velocity
/// pair. Condition sample `i` uses its own RNG stream, so the result does
/// not depend on how the work is scheduled.
pub fn mi_estimate(
    field: &(impl VelocityField + ?Sized),
    source: &dyn ConditionalSampler,
    config: &EstimateConfig,
) -> Result<MIEstimate> {
    config.validate()?;
    let start = Instant::now();
    let sampler = TimeSampler::new(config.t_eps)?;
    let per_y: Vec<f64> = (0..config.n_y)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_stream(config.seed, "mi-estimate", i as u64);
            let cond = source.sample_condition(&mut rng);
            let mut times = draw_times(config, &sampler, &mut rng);
            match config.mode {
                XtMode::DataCoupled => data_coupled_term(field, source, &cond, &times, config, &mut rng),
                XtMode::Trajectory => trajectory_term(field, &cond, &mut times, config, &mut rng),
            }
        })
        .collect::<Result<_>>()?;

    if let Some(index) = per_y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "per-condition MI term",
            index,
        });
    }
    let (value, stderr) = mean_and_stderr(&per_y);
    Ok(MIEstimate {
        value,
        stderr,
        n_y: config.n_y,
        n_t: config.n_t,
        n_x: config.n_x,
        seed: config.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        estimator_tag: config.tag(),
    })
}

/// Sequential mean and standard error of the mean.
pub(crate) fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointwiseConfig {
    pub steps: usize,
    /// Guidance scale driving the Euler updates.
    pub w_sample: f64,
    /// Guidance scale of the guided velocity inside the MI integrand.
    pub w_mi: f64,
    pub t_eps: f64,
}

impl Default for PointwiseConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            w_sample: 4.5,
            w_mi: 4.5,
            t_eps: 0.99,
        }
    }
}

/// Endpoints and point-wise MI of a batch of trajectories.
#[derive(Clone, Debug)]
pub struct PointwiseBatch {
    pub endpoints: Array2<f64>,
    pub mi: Vec<f64>,
}

/// Euler sampling from the rows of `x0` under `cond`, accumulating
/// `dt * t/(1-t) * u_y . (u_y - u_null)` at every grid time with the ratio
/// frozen beyond `t_eps`.
pub fn pointwise_mi_batch(
    field: &(impl VelocityField + ?Sized),
    cond: &Condition,
    x0: Array2<f64>,
    config: &PointwiseConfig,
) -> Result<PointwiseBatch> {
    if config.steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    if !(config.w_sample >= 0.0 && config.w_mi >= 0.0) {
        return Err(Error::config("guidance scales must be non-negative"));
    }
    let sampler = TimeSampler::new(config.t_eps)?;
    let n = x0.nrows();
    let dt = 1.0 / config.steps as f64;
    let cond_slice = std::slice::from_ref(cond);
    let mut x = x0;
    let mut mi = vec![0.0; n];
    for k in 0..config.steps {
        let t = k as f64 * dt;
        let (guided, null) = field.guided_and_null(x.view(), &vec![t; n], cond_slice)?;
        let scored = cfg_combine(guided.clone(), null.clone(), config.w_mi);
        let factor = dt * sampler.frozen_ratio(t);
        for (i, acc) in mi.iter_mut().enumerate() {
            let g = scored.row(i);
            let u = null.row(i);
            let dot: f64 = g.iter().zip(u).map(|(gi, ui)| gi * (gi - ui)).sum();
            *acc += factor * dot;
        }
        if let Some(index) = mi.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "point-wise MI accumulator",
                index: k * n + index,
            });
        }
        let step = cfg_combine(guided, null, config.w_sample);
        Zip::from(&mut x).and(&step).for_each(|xi, &ui| *xi += dt * ui);
    }
    Ok(PointwiseBatch { endpoints: x, mi })
}

/// One generated sample and its point-wise MI with `cond`.
pub fn pointwise_mi(
    field: &(impl VelocityField + ?Sized),
    cond: &Condition,
    config: &PointwiseConfig,
    rng: &mut Rng64,
) -> Result<(Vec<f64>, f64)> {
    let x0 = standard_normal(rng, 1, field.data_dim());
    let out = pointwise_mi_batch(field, cond, x0, config)?;
    Ok((out.endpoints.row(0).to_vec(), out.mi[0]))
}
