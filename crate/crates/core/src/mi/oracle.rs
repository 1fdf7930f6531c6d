//! Closed-form velocities for Gaussian targets.
//!
//! If `x1 | y ~ N(m_y, diag(sigma^2))` then along the linear path
//! `x_t | y ~ N(t m_y, diag(s_t^2))` with `s_t^2 = (1 - t)^2 + t^2 sigma^2`,
//! and the velocity generating that path is
//! `m_y + (t sigma^2 - (1 - t)) / s_t^2 * (x - t m_y)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::flow::{check_batch, cond_at, Condition, ConditionSpace, ConditionalSampler, JointSampler, VelocityField};
use crate::rng::{standard_normal, Rng64};

fn check_time(t: f64) -> Result<()> {
    if (0.0..1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "analytic velocity needs t in [0, 1), got {t}; truncate the time integral at t_eps"
        )))
    }
}

/// Velocity of the Gaussian path with target mean `m` and variance `var`,
/// one coordinate at a time.
pub fn gaussian_path_velocity(x: f64, m: f64, var: f64, t: f64) -> f64 {
    let s2 = (1.0 - t).powi(2) + t * t * var;
    m + (t * var - (1.0 - t)) / s2 * (x - t * m)
}

/// Score of `N(t m, s_t^2)` at `x`, one coordinate at a time.
pub fn gaussian_path_score(x: f64, m: f64, var: f64, t: f64) -> f64 {
    let s2 = (1.0 - t).powi(2) + t * t * var;
    -(x - t * m) / s2
}

/// Finite-label Gaussian mixture task: `x | y ~ N(mu_y, sigma^2 I)`, `y ~ prior`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticGaussianTask {
    means: Vec<Vec<f64>>,
    variance: f64,
    prior: Vec<f64>,
    log_prior: Vec<f64>,
}

impl AnalyticGaussianTask {
    pub fn new(means: Vec<Vec<f64>>, variance: f64, prior: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means[0].is_empty() {
            return Err(Error::config("task needs at least one non-empty mean"));
        }
        check_dim("prior length", means.len(), prior.len())?;
        let d = means[0].len();
        for m in &means {
            check_dim("mean dimension", d, m.len())?;
        }
        if !(variance > 0.0) {
            return Err(Error::config(format!("variance must be positive, got {variance}")));
        }
        let total: f64 = prior.iter().sum();
        if prior.iter().any(|&p| !(p > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("prior must be positive and sum to 1, got {prior:?}")));
        }
        let log_prior = prior.iter().map(|p| p.ln()).collect();
        Ok(Self {
            means,
            variance,
            prior,
            log_prior,
        })
    }

    /// Equiprobable 1-D task with the given means.
    pub fn symmetric_1d(means: &[f64], variance: f64) -> Result<Self> {
        let k = means.len();
        Self::new(means.iter().map(|&m| vec![m]).collect(), variance, vec![1.0 / k as f64; k])
    }

    pub fn num_labels(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// `P(y | x_t = x)` for every label.
    pub fn path_posterior(&self, x: ArrayView1<'_, f64>, t: f64) -> Vec<f64> {
        let s2 = (1.0 - t).powi(2) + t * t * self.variance;
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.log_prior)
            .map(|(m, lp)| {
                let d2: f64 = x.iter().zip(m).map(|(xi, mi)| (xi - t * mi).powi(2)).sum();
                lp - d2 / (2.0 * s2)
            })
            .collect();
        softmax(&logits)
    }

    /// `P(y | x)` under the target distribution.
    pub fn posterior(&self, x: ArrayView1<'_, f64>) -> Vec<f64> {
        self.path_posterior(x, 1.0)
    }

    /// Closed-form velocity at a single state; `Condition::Null` gives the
    /// posterior-weighted mixture of the per-label velocities.
    pub fn velocity_at(&self, x: ArrayView1<'_, f64>, cond: &Condition, t: f64) -> Result<Array1<f64>> {
        check_time(t)?;
        check_dim("state dimension", self.dim(), x.len())?;
        let guided = |label: usize| -> Array1<f64> {
            let m = &self.means[label];
            Array1::from_shape_fn(x.len(), |j| gaussian_path_velocity(x[j], m[j], self.variance, t))
        };
        match cond {
            Condition::Label(l) if *l < self.num_labels() => Ok(guided(*l)),
            Condition::Null => {
                let post = self.path_posterior(x, t);
                let mut u = Array1::zeros(x.len());
                for (l, p) in post.iter().enumerate() {
                    u.scaled_add(*p, &guided(l));
                }
                Ok(u)
            }
            other => Err(Error::Domain(format!("condition {other:?} is not a label of this task"))),
        }
    }

    /// Closed-form score of the guided or marginal path at a single state.
    pub fn score_at(&self, x: ArrayView1<'_, f64>, cond: &Condition, t: f64) -> Result<Array1<f64>> {
        check_time(t)?;
        let guided = |label: usize| -> Array1<f64> {
            let m = &self.means[label];
            Array1::from_shape_fn(x.len(), |j| gaussian_path_score(x[j], m[j], self.variance, t))
        };
        match cond {
            Condition::Label(l) if *l < self.num_labels() => Ok(guided(*l)),
            Condition::Null => {
                let post = self.path_posterior(x, t);
                let mut s = Array1::zeros(x.len());
                for (l, p) in post.iter().enumerate() {
                    s.scaled_add(*p, &guided(l));
                }
                Ok(s)
            }
            other => Err(Error::Domain(format!("condition {other:?} is not a label of this task"))),
        }
    }

    /// Density of the path marginal `p_t` (all labels) at `x`.
    pub fn path_density(&self, x: ArrayView1<'_, f64>, t: f64) -> f64 {
        let s2 = (1.0 - t).powi(2) + t * t * self.variance;
        let d = x.len() as f64;
        let norm = (2.0 * std::f64::consts::PI * s2).powf(-0.5 * d);
        self.means
            .iter()
            .zip(&self.prior)
            .map(|(m, p)| {
                let d2: f64 = x.iter().zip(m).map(|(xi, mi)| (xi - t * mi).powi(2)).sum();
                p * norm * (-d2 / (2.0 * s2)).exp()
            })
            .sum()
    }
}

/// Analytic velocity for either oracle.
pub fn analytic_velocity(
    task: &AnalyticGaussianTask,
    x: ArrayView1<'_, f64>,
    cond: &Condition,
    t: f64,
) -> Result<Array1<f64>> {
    task.velocity_at(x, cond, t)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl VelocityField for AnalyticGaussianTask {
    fn data_dim(&self) -> usize {
        self.dim()
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, t: &[f64], cond: &[Condition]) -> Result<Array2<f64>> {
        check_batch(x, self.dim(), t, cond)?;
        let mut out = Array2::zeros(x.raw_dim());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.assign(&self.velocity_at(x.row(i), cond_at(cond, i), t[i])?);
        }
        Ok(out)
    }
}

impl JointSampler for AnalyticGaussianTask {
    fn data_dim(&self) -> usize {
        self.dim()
    }

    fn condition_space(&self) -> ConditionSpace {
        ConditionSpace::Labels {
            count: self.num_labels(),
        }
    }

    fn sample_joint(&self, rng: &mut Rng64, n: usize) -> (Array2<f64>, Vec<Condition>) {
        let mut x = Array2::zeros((n, self.dim()));
        let mut cond = Vec::with_capacity(n);
        for mut row in x.rows_mut() {
            let c = self.sample_condition(rng);
            row.assign(&self.sample_given(&c, rng, 1).row(0));
            cond.push(c);
        }
        (x, cond)
    }
}

impl ConditionalSampler for AnalyticGaussianTask {
    fn sample_condition(&self, rng: &mut Rng64) -> Condition {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (l, p) in self.prior.iter().enumerate() {
            acc += p;
            if u < acc {
                return Condition::Label(l);
            }
        }
        Condition::Label(self.num_labels() - 1)
    }

    fn sample_given(&self, cond: &Condition, rng: &mut Rng64, n: usize) -> Array2<f64> {
        let Condition::Label(l) = cond else {
            panic!("mixture task conditions are labels, got {cond:?}");
        };
        let sd = self.variance.sqrt();
        let m = &self.means[*l];
        let mut x = standard_normal(rng, n, self.dim());
        for mut row in x.rows_mut() {
            for (v, mj) in row.iter_mut().zip(m) {
                *v = mj + sd * *v;
            }
        }
        x
    }
}

/// Jointly Gaussian pair with unit marginals and coordinate-wise correlations:
/// `x_i = rho_i y_i + sqrt(1 - rho_i^2) e_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPairOracle {
    rho: Vec<f64>,
}

impl GaussianPairOracle {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        if rho.is_empty() {
            return Err(Error::config("need at least one correlation"));
        }
        if let Some(r) = rho.iter().find(|r| !(r.abs() < 1.0)) {
            return Err(Error::config(format!("correlation must satisfy |rho| < 1, got {r}")));
        }
        Ok(Self { rho })
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// `-1/2 sum ln(1 - rho_i^2)`.
    pub fn true_mi(&self) -> f64 {
        -0.5 * self.rho.iter().map(|r| (-r * r).ln_1p()).sum::<f64>()
    }
}

impl VelocityField for GaussianPairOracle {
    fn data_dim(&self) -> usize {
        self.rho.len()
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, t: &[f64], cond: &[Condition]) -> Result<Array2<f64>> {
        check_batch(x, self.rho.len(), t, cond)?;
        let mut out = Array2::zeros(x.raw_dim());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            check_time(t[i])?;
            match cond_at(cond, i) {
                Condition::Null => {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = gaussian_path_velocity(x[[i, j]], 0.0, 1.0, t[i]);
                    }
                }
                Condition::Value(y) if y.len() == self.rho.len() => {
                    for (j, v) in row.iter_mut().enumerate() {
                        let r = self.rho[j];
                        *v = gaussian_path_velocity(x[[i, j]], r * y[j], 1.0 - r * r, t[i]);
                    }
                }
                other => return Err(Error::Domain(format!("condition {other:?} is not a value of this task"))),
            }
        }
        Ok(out)
    }
}

impl JointSampler for GaussianPairOracle {
    fn data_dim(&self) -> usize {
        self.rho.len()
    }

    fn condition_space(&self) -> ConditionSpace {
        ConditionSpace::Continuous { dim: self.rho.len() }
    }

    fn sample_joint(&self, rng: &mut Rng64, n: usize) -> (Array2<f64>, Vec<Condition>) {
        let mut x = Array2::zeros((n, self.rho.len()));
        let mut cond = Vec::with_capacity(n);
        for mut row in x.rows_mut() {
            let c = self.sample_condition(rng);
            row.assign(&self.sample_given(&c, rng, 1).row(0));
            cond.push(c);
        }
        (x, cond)
    }
}

impl ConditionalSampler for GaussianPairOracle {
    fn sample_condition(&self, rng: &mut Rng64) -> Condition {
        Condition::Value((0..self.rho.len()).map(|_| rng.sample(StandardNormal)).collect())
    }

    fn sample_given(&self, cond: &Condition, rng: &mut Rng64, n: usize) -> Array2<f64> {
        let Condition::Value(y) = cond else {
            panic!("gaussian pair conditions are values, got {cond:?}");
        };
        let mut x = standard_normal(rng, n, self.rho.len());
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let r = self.rho[j];
                *v = r * y[j] + (1.0 - r * r).sqrt() * *v;
            }
        }
        x
    }
}
