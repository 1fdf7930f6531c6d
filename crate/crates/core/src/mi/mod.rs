//! Mutual information from velocity fields.
//!
//! For the linear path from `N(0, I)` the score of `p_t` is
//! `(t u_t(x) - x) / (1 - t)`, and
//!
//! ```text
//! I(X; Y) = E_Y  int_0^1  E_{X_t | Y} [ t/(1-t) * u_t(X_t | Y) . (u_t(X_t | Y) - u_t(X_t)) ] dt
//! ```
//!
//! [`mi_estimate`] estimates the aggregate quantity by Monte Carlo over `Y`,
//! importance-sampled `t` and `X_t`. [`pointwise_mi`] fuses the inner
//! integral for a single condition with Euler sampling, scoring each
//! generated sample as it is produced.

mod estimate;
mod oracle;

pub use estimate::{
    mi_estimate, pointwise_mi, pointwise_mi_batch, EstimateConfig, EstimatorTag, MIEstimate, PointwiseBatch,
    PointwiseConfig, TimeScheme, XtMode,
};
pub(crate) use estimate::mean_and_stderr;
pub use oracle::{
    analytic_velocity, gaussian_path_score, gaussian_path_velocity, AnalyticGaussianTask, GaussianPairOracle,
};

use ndarray::{Array1, ArrayView1};

use crate::error::{check_dim, Error, Result};

/// Score `(t u - x) / (1 - t)` of the path marginal that `u` generates.
pub fn score_from_velocity(u: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
    check_dim("velocity length", x.len(), u.len())?;
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "score recovery needs t in [0, 1), got {t}; freeze the time weight at t_eps instead"
        )));
    }
    Ok((&u * t - &x) / (1.0 - t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn source_score_at_time_zero() {
        let x = array![0.5, -1.5, 2.0];
        let u = array![9.0, 9.0, 9.0];
        assert_eq!(score_from_velocity(u.view(), x.view(), 0.0).unwrap(), -&x);
    }

    #[test]
    fn single_target_path_score() {
        let x1 = array![1.0, -2.0];
        let x = array![0.3, 0.4];
        for &t in &[0.1, 0.5, 0.9, 0.999] {
            let u = (&x1 - &x) / (1.0 - t);
            let s = score_from_velocity(u.view(), x.view(), t).unwrap();
            let want = -(&x - &(&x1 * t)) / (1.0 - t).powi(2);
            assert!((&s - &want).iter().all(|v| v.abs() <= 1e-9 * want.iter().map(|w| w.abs()).fold(1.0, f64::max)));
        }
    }

    #[test]
    fn time_one_is_an_error() {
        let x = array![0.0];
        assert!(score_from_velocity(x.view(), x.view(), 1.0).is_err());
    }
}
