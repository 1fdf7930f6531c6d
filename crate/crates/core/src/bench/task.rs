use std::cell::Cell;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Condition, ConditionSpace, ConditionalSampler, JointSampler, VelocityField};
use crate::mi::{AnalyticGaussianTask, GaussianPairOracle};
use crate::quadrature::integrate;
use crate::rng::Rng64;

/// Parameters of a synthetic task, tagged by family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    /// `(X_i, Y_i)` unit-variance Gaussian pairs with correlation `rho_i`.
    CorrelatedGaussian { rho: Vec<f64> },
    /// Label `Y ~ prior`, `X | Y = k ~ N(means[k], variance I)`.
    GaussianMixtureLabel {
        means: Vec<Vec<f64>>,
        variance: f64,
        #[serde(default)]
        prior: Option<Vec<f64>>,
    },
    /// Correlated Gaussian pairs with `X` passed through an elementwise cube root.
    NonlinearTransformedGaussian { rho: Vec<f64> },
}

impl TaskSpec {
    pub fn family(&self) -> &'static str {
        match self {
            TaskSpec::CorrelatedGaussian { .. } => "correlated-gaussian",
            TaskSpec::GaussianMixtureLabel { .. } => "gaussian-mixture-label",
            TaskSpec::NonlinearTransformedGaussian { .. } => "nonlinear-transformed-gaussian",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthSource {
    ClosedForm,
    Quadrature,
}

#[derive(Clone, Debug)]
enum Joint {
    Pair(GaussianPairOracle),
    Mixture(AnalyticGaussianTask),
    CubeRoot(GaussianPairOracle),
}

/// A synthetic joint distribution with known `I(X; Y)` in nats.
#[derive(Clone, Debug)]
pub struct MITask {
    pub task_id: String,
    pub spec: TaskSpec,
    pub true_mi: f64,
    pub truth_source: TruthSource,
    joint: Joint,
}

pub fn make_task(task_id: impl Into<String>, spec: TaskSpec) -> Result<MITask> {
    let (joint, true_mi, truth_source) = match &spec {
        TaskSpec::CorrelatedGaussian { rho } => {
            let o = GaussianPairOracle::new(rho.clone())?;
            let mi = o.true_mi();
            (Joint::Pair(o), mi, TruthSource::ClosedForm)
        }
        TaskSpec::NonlinearTransformedGaussian { rho } => {
            let o = GaussianPairOracle::new(rho.clone())?;
            let mi = o.true_mi();
            (Joint::CubeRoot(o), mi, TruthSource::ClosedForm)
        }
        TaskSpec::GaussianMixtureLabel { means, variance, prior } => {
            let prior = match prior {
                Some(p) => p.clone(),
                None => vec![1.0 / means.len().max(1) as f64; means.len()],
            };
            let m = AnalyticGaussianTask::new(means.clone(), *variance, prior)?;
            let mi = mixture_mi(&m)?;
            (Joint::Mixture(m), mi, TruthSource::Quadrature)
        }
    };
    Ok(MITask {
        task_id: task_id.into(),
        spec,
        true_mi: true_mi.max(0.0),
        truth_source,
        joint,
    })
}

/// `sum_k pi_k KL(N(mu_k, s I) || p)` by adaptive quadrature in one or two dimensions.
fn mixture_mi(task: &AnalyticGaussianTask) -> Result<f64> {
    let dim = task.dim();
    if dim > 2 {
        return Err(Error::config(format!(
            "mixture ground truth is computed by quadrature for one or two dimensions, got {dim}"
        )));
    }
    let sd = task.variance().sqrt();
    let bounds: Vec<(f64, f64)> = (0..dim)
        .map(|j| {
            let lo = task.means().iter().map(|m| m[j]).fold(f64::INFINITY, f64::min);
            let hi = task.means().iter().map(|m| m[j]).fold(f64::NEG_INFINITY, f64::max);
            (lo - 12.0 * sd, hi + 12.0 * sd)
        })
        .collect();

    let log_terms = |x: &[f64]| -> Vec<f64> {
        task.means()
            .iter()
            .zip(task.prior())
            .map(|(m, &p)| {
                let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
                p.ln() - 0.5 * d2 / task.variance() - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI * task.variance()).ln()
            })
            .collect()
    };
    // sum_k pi_k phi_k(x) (ln phi_k(x) - ln p(x))
    let integrand = |x: &[f64]| -> f64 {
        let l = log_terms(x);
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return 0.0;
        }
        let log_p = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        l.iter()
            .zip(task.prior())
            .map(|(&lk, &pk)| lk.exp() * (lk - pk.ln() - log_p))
            .sum()
    };

    let (abs_tol, rel_tol) = (1e-11, 1e-10);
    let value = if dim == 1 {
        integrate(|x| integrand(&[x]), bounds[0].0, bounds[0].1, abs_tol, rel_tol)?.value
    } else {
        let failure = Cell::new(None);
        let outer = integrate(
            |a| match integrate(|b| integrand(&[a, b]), bounds[1].0, bounds[1].1, abs_tol, rel_tol) {
                Ok(r) => r.value,
                Err(e) => {
                    failure.set(Some(e));
                    f64::NAN
                }
            },
            bounds[0].0,
            bounds[0].1,
            abs_tol,
            rel_tol,
        );
        if let Some(e) = failure.take() {
            return Err(e);
        }
        outer?.value
    };
    Ok(value)
}

impl MITask {
    pub fn data_dim(&self) -> usize {
        match &self.joint {
            Joint::Pair(o) | Joint::CubeRoot(o) => o.rho().len(),
            Joint::Mixture(m) => m.dim(),
        }
    }

    /// Length of `Y` as a real vector (labels are one-hot).
    pub fn condition_dim(&self) -> usize {
        match &self.joint {
            Joint::Pair(o) | Joint::CubeRoot(o) => o.rho().len(),
            Joint::Mixture(m) => m.num_labels(),
        }
    }

    /// Analytic velocity field of the task, where one exists.
    pub fn oracle(&self) -> Option<&dyn OracleField> {
        match &self.joint {
            Joint::Pair(o) => Some(o),
            Joint::Mixture(m) => Some(m),
            Joint::CubeRoot(_) => None,
        }
    }

    /// Labelled two-Gaussian structure with a closed-form posterior, if any.
    pub fn mixture(&self) -> Option<&AnalyticGaussianTask> {
        match &self.joint {
            Joint::Mixture(m) => Some(m),
            _ => None,
        }
    }

    /// Real-vector encoding of a condition.
    pub fn encode_condition(&self, cond: &Condition) -> Result<Vec<f64>> {
        match (cond, &self.joint) {
            (Condition::Label(k), Joint::Mixture(m)) if *k < m.num_labels() => {
                let mut v = vec![0.0; m.num_labels()];
                v[*k] = 1.0;
                Ok(v)
            }
            (Condition::Value(y), Joint::Pair(o) | Joint::CubeRoot(o)) if y.len() == o.rho().len() => Ok(y.clone()),
            _ => Err(Error::Domain(format!("condition {cond:?} does not belong to task {}", self.task_id))),
        }
    }
}

/// A velocity field that also samples its own joint distribution.
pub trait OracleField: VelocityField + ConditionalSampler {}
impl<T: VelocityField + ConditionalSampler> OracleField for T {}

fn cube_root(mut x: Array2<f64>) -> Array2<f64> {
    x.mapv_inplace(f64::cbrt);
    x
}

impl JointSampler for MITask {
    fn data_dim(&self) -> usize {
        MITask::data_dim(self)
    }

    fn condition_space(&self) -> ConditionSpace {
        match &self.joint {
            Joint::Pair(o) | Joint::CubeRoot(o) => o.condition_space(),
            Joint::Mixture(m) => m.condition_space(),
        }
    }

    fn sample_joint(&self, rng: &mut Rng64, n: usize) -> (Array2<f64>, Vec<Condition>) {
        match &self.joint {
            Joint::Pair(o) => o.sample_joint(rng, n),
            Joint::Mixture(m) => m.sample_joint(rng, n),
            Joint::CubeRoot(o) => {
                let (x, c) = o.sample_joint(rng, n);
                (cube_root(x), c)
            }
        }
    }
}

impl ConditionalSampler for MITask {
    fn sample_condition(&self, rng: &mut Rng64) -> Condition {
        match &self.joint {
            Joint::Pair(o) | Joint::CubeRoot(o) => o.sample_condition(rng),
            Joint::Mixture(m) => m.sample_condition(rng),
        }
    }

    fn sample_given(&self, cond: &Condition, rng: &mut Rng64, n: usize) -> Array2<f64> {
        match &self.joint {
            Joint::Pair(o) => o.sample_given(cond, rng, n),
            Joint::Mixture(m) => m.sample_given(cond, rng, n),
            Joint::CubeRoot(o) => cube_root(o.sample_given(cond, rng, n)),
        }
    }
}

/// `n` i.i.d. joint draws: `X` rows and `Y` as real vectors.
pub fn sample_pair(task: &MITask, rng: &mut Rng64, n: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if n == 0 {
        return Err(Error::config("sample count must be positive"));
    }
    let (x, cond) = task.sample_joint(rng, n);
    let mut y = Array2::zeros((n, task.condition_dim()));
    for (mut row, c) in y.rows_mut().into_iter().zip(&cond) {
        row.assign(&ndarray::ArrayView1::from(&task.encode_condition(c)?[..]));
    }
    Ok((x, y))
}

/// The default six-task suite.
pub fn default_suite() -> Result<Vec<MITask>> {
    [
        ("gauss-rho0", TaskSpec::CorrelatedGaussian { rho: vec![0.0] }),
        ("gauss-rho0.5", TaskSpec::CorrelatedGaussian { rho: vec![0.5] }),
        ("gauss-rho0.9", TaskSpec::CorrelatedGaussian { rho: vec![0.9] }),
        (
            "mixture-1d-mu2",
            TaskSpec::GaussianMixtureLabel {
                means: vec![vec![-2.0], vec![2.0]],
                variance: 1.0,
                prior: None,
            },
        ),
        ("gauss-5d-rho0.7", TaskSpec::CorrelatedGaussian { rho: vec![0.7; 5] }),
        ("cuberoot-rho0.9", TaskSpec::NonlinearTransformedGaussian { rho: vec![0.9] }),
    ]
    .into_iter()
    .map(|(id, spec)| make_task(id, spec))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::ArrayView2;

    fn column_means(x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.mean_axis(ndarray::Axis(0)).unwrap().to_vec()
    }

    #[test]
    fn closed_form_truths() {
        let t = make_task("a", TaskSpec::CorrelatedGaussian { rho: vec![0.0] }).unwrap();
        assert_eq!(t.true_mi, 0.0);
        let t = make_task("b", TaskSpec::CorrelatedGaussian { rho: vec![0.5] }).unwrap();
        assert!((t.true_mi - 0.143_841_036_225_890_2).abs() < 1e-15);
        let t = make_task("c", TaskSpec::CorrelatedGaussian { rho: vec![0.9] }).unwrap();
        assert!((t.true_mi - 0.830_365_603_410_825_5).abs() < 1e-15);
        assert!(make_task("d", TaskSpec::CorrelatedGaussian { rho: vec![1.0] }).is_err());
    }

    #[test]
    fn mixture_truth_matches_reference() {
        // Reference from an independent fine trapezoid rule.
        let t = make_task(
            "m",
            TaskSpec::GaussianMixtureLabel {
                means: vec![vec![-2.0], vec![2.0]],
                variance: 1.0,
                prior: None,
            },
        )
        .unwrap();
        let phi = |x: f64, m: f64| (-(x - m).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let (a, b, n) = (-16.0, 16.0, 200_000);
        let h = (b - a) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let p = 0.5 * phi(x, -2.0) + 0.5 * phi(x, 2.0);
            let mut f = 0.0;
            for m in [-2.0, 2.0] {
                let q = phi(x, m);
                if q > 0.0 {
                    f += 0.5 * q * (q / p).ln();
                }
            }
            acc += if i == 0 || i == n { 0.5 * f } else { f };
        }
        assert!((t.true_mi - acc * h).abs() < 1e-9, "{} vs {}", t.true_mi, acc * h);
        assert_eq!(t.truth_source, TruthSource::Quadrature);
    }

    #[test]
    fn two_dimensional_mixture_truth_is_bounded_by_label_entropy() {
        let t = make_task(
            "m2",
            TaskSpec::GaussianMixtureLabel {
                means: vec![vec![-1.0, 0.5], vec![1.0, -0.5]],
                variance: 1.0,
                prior: Some(vec![0.3, 0.7]),
            },
        )
        .unwrap();
        let h = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        assert!(t.true_mi > 0.0 && t.true_mi < h);
        // Rotating the means onto one axis leaves the MI unchanged.
        let d = (1.0f64 + 0.25).sqrt();
        let r = make_task(
            "m1",
            TaskSpec::GaussianMixtureLabel {
                means: vec![vec![-d], vec![d]],
                variance: 1.0,
                prior: Some(vec![0.3, 0.7]),
            },
        )
        .unwrap();
        assert!((t.true_mi - r.true_mi).abs() < 1e-8, "{} vs {}", t.true_mi, r.true_mi);
    }

    #[test]
    fn gaussian_samples_match_moments() {
        let t = make_task("g", TaskSpec::CorrelatedGaussian { rho: vec![0.5, -0.3] }).unwrap();
        let n = 40_000;
        let (x, y) = sample_pair(&t, &mut substream(1, "s"), n).unwrap();
        let tol = 4.0 / (n as f64).sqrt();
        for j in 0..2 {
            let xm = x.column(j).mean().unwrap();
            let ym = y.column(j).mean().unwrap();
            let cov = x.column(j).iter().zip(y.column(j)).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            let xv = x.column(j).iter().map(|a| a * a).sum::<f64>() / n as f64;
            assert!(xm.abs() < tol && ym.abs() < tol);
            assert!((xv - 1.0).abs() < 2.0 * tol);
            assert!((cov - [0.5, -0.3][j]).abs() < 2.0 * tol, "{cov}");
        }
    }

    #[test]
    fn label_frequencies_match_prior() {
        let t = make_task(
            "m",
            TaskSpec::GaussianMixtureLabel {
                means: vec![vec![-1.0], vec![1.0]],
                variance: 1.0,
                prior: Some(vec![0.25, 0.75]),
            },
        )
        .unwrap();
        let n = 20_000;
        let (_, y) = sample_pair(&t, &mut substream(2, "s"), n).unwrap();
        let freq = column_means(y.view());
        assert!((freq[1] - 0.75).abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn cube_root_inverts_to_gaussian_marginals() {
        let t = make_task("c", TaskSpec::NonlinearTransformedGaussian { rho: vec![0.9] }).unwrap();
        let n = 20_000;
        let (x, _) = sample_pair(&t, &mut substream(3, "s"), n).unwrap();
        let z: Vec<f64> = x.iter().map(|v| v.powi(3)).collect();
        let m = z.iter().sum::<f64>() / n as f64;
        let v = z.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64;
        let k = z.iter().map(|a| (a - m).powi(4)).sum::<f64>() / n as f64 / (v * v);
        let tol = 4.0 / (n as f64).sqrt();
        assert!(m.abs() < tol && (v - 1.0).abs() < 2.0 * tol && (k - 3.0).abs() < 0.15, "{m} {v} {k}");
        assert_eq!(t.true_mi, make_task("u", TaskSpec::CorrelatedGaussian { rho: vec![0.9] }).unwrap().true_mi);
        assert!(t.oracle().is_none());
    }

    #[test]
    fn spec_parsing_is_strict() {
        let ok: TaskSpec = serde_json::from_str(r#"{"family": "correlated-gaussian", "rho": [0.5]}"#).unwrap();
        assert_eq!(ok, TaskSpec::CorrelatedGaussian { rho: vec![0.5] });
        assert!(serde_json::from_str::<TaskSpec>(r#"{"family": "correlated-gaussian", "rho": [0.5], "x": 1}"#).is_err());
    }
}
