//! Importance sampling of the time variable.
//!
//! The MI integrand carries a `t / (1 - t)` factor that diverges at `t = 1`.
//! Times are drawn from a density proportional to that factor on
//! `[0, t_eps)` and constant on `[t_eps, 1]`; its CDF inverts in closed form
//! through the principal branch of the Lambert W function.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const INV_E: f64 = 0.367_879_441_171_442_33;
const HALLEY_MAX_ITERS: usize = 50;
const HALLEY_TOL: f64 = 1e-14;

/// Principal branch `W0(z)` of the Lambert W function, `w e^w = z`, `w >= -1`.
pub fn lambert_w0(z: f64) -> Result<f64> {
    if z.is_nan() {
        return Err(Error::Domain("lambert_w0 of NaN".into()));
    }
    if z < -INV_E {
        // Arguments that round just below the branch point are the branch point.
        if z >= -INV_E * (1.0 + 4.0 * f64::EPSILON) {
            return Ok(-1.0);
        }
        return Err(Error::Domain(format!("lambert_w0 requires z >= -1/e, got {z}")));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    if z.is_infinite() {
        return Ok(f64::INFINITY);
    }

    let mut w = initial_guess(z);
    for _ in 0..HALLEY_MAX_ITERS {
        if w == -1.0 {
            return Ok(w);
        }
        let ew = w.exp();
        let f = w * ew - z;
        let wp1 = w + 1.0;
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        if denom == 0.0 || !denom.is_finite() {
            break;
        }
        let next = w - f / denom;
        let step = (next - w).abs();
        w = next.max(-1.0);
        if step <= HALLEY_TOL * (1.0 + w.abs()) {
            return Ok(w);
        }
    }
    let residual = (w * w.exp() - z).abs();
    if residual <= 1e-12 * z.abs().max(1.0) {
        return Ok(w);
    }
    Err(Error::Convergence {
        what: "lambert_w0 Halley iteration",
        iterations: HALLEY_MAX_ITERS,
        residual,
    })
}

fn initial_guess(z: f64) -> f64 {
    if z < -0.3 {
        // series about the branch point in p = sqrt(2 (e z + 1))
        let p = (2.0 * (std::f64::consts::E * z + 1.0)).max(0.0).sqrt();
        -1.0 + p * (1.0 + p * (-1.0 / 3.0 + p * (11.0 / 72.0)))
    } else if z <= 3.0 {
        let l = z.ln_1p();
        l * (1.0 - (1.0 + l).ln() / (2.0 + l))
    } else {
        let l1 = z.ln();
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    }
}

/// Truncated `t / (1 - t)` time density with its closed-form inverse CDF.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSampler {
    t_eps: f64,
    z: f64,
    u_star: f64,
}

/// How the importance weight treats times at or beyond `t_eps`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailWeight {
    /// `t / (1 - t)` is frozen at its `t_eps` value, so every draw has
    /// weight `Z`. Bounded, at the cost of a truncation bias.
    #[default]
    Frozen,
    /// Unbiased weight `Z (t / (1 - t)) / (t_eps / (1 - t_eps))` on the tail.
    Exact,
}

impl TimeSampler {
    pub fn new(t_eps: f64) -> Result<Self> {
        if !(t_eps > 0.0 && t_eps < 1.0) {
            return Err(Error::config(format!("t_eps must lie in (0, 1), got {t_eps}")));
        }
        let z = -(-t_eps).ln_1p();
        Ok(Self {
            t_eps,
            z,
            u_star: (z - t_eps) / z,
        })
    }

    pub fn t_eps(&self) -> f64 {
        self.t_eps
    }

    /// Normalizer `Z = -ln(1 - t_eps)`.
    pub fn normalizer(&self) -> f64 {
        self.z
    }

    /// CDF value at `t_eps`, where the inverse CDF switches branch.
    pub fn u_star(&self) -> f64 {
        self.u_star
    }

    /// `t / (1 - t)` below `t_eps`, frozen at its `t_eps` value above.
    pub fn frozen_ratio(&self, t: f64) -> f64 {
        let t = t.min(self.t_eps);
        t / (1.0 - t)
    }

    /// Normalized density at `t`.
    pub fn density(&self, t: f64) -> Result<f64> {
        check_unit("t", t)?;
        Ok(self.frozen_ratio(t) / self.z)
    }

    /// Analytic CDF.
    pub fn cdf(&self, t: f64) -> Result<f64> {
        check_unit("t", t)?;
        let unnormalized = if t < self.t_eps {
            -(-t).ln_1p() - t
        } else {
            self.z + self.t_eps / (1.0 - self.t_eps) * (t - 1.0)
        };
        Ok(unnormalized / self.z)
    }

    pub fn inverse_cdf(&self, u: f64) -> Result<f64> {
        check_unit("u", u)?;
        if u < self.u_star {
            self.lower_branch(u)
        } else {
            Ok(self.upper_branch(u))
        }
    }

    /// `1 + W0(-exp(-Z u - 1))`, the inverse on `[0, u*)`.
    pub fn lower_branch(&self, u: f64) -> Result<f64> {
        let arg = if u == 0.0 { -INV_E } else { -(-self.z * u - 1.0).exp() };
        Ok(1.0 + lambert_w0(arg)?)
    }

    /// Linear inverse on `[u*, 1]`.
    pub fn upper_branch(&self, u: f64) -> f64 {
        let te = self.t_eps;
        1.0 + (1.0 - te) / te * ((-te).ln_1p() + self.z * u)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        self.inverse_cdf(u).expect("u drawn from [0, 1)")
    }

    /// Ratio of the target `t / (1 - t)` to the sampling density at `t`.
    pub fn importance_weight(&self, t: f64, tail: TailWeight) -> f64 {
        if t < self.t_eps {
            return self.z;
        }
        match tail {
            TailWeight::Frozen => self.z,
            TailWeight::Exact => self.z * (t / (1.0 - t)) / self.frozen_ratio(self.t_eps),
        }
    }
}

/// Draws `t` by inverse-transform sampling.
pub fn sample_time(rng: &mut impl Rng, sampler: &TimeSampler) -> f64 {
    sampler.sample(rng)
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must lie in [0, 1], got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use std::f64::consts::E;

    #[test]
    fn lambert_fixed_points() {
        assert_eq!(lambert_w0(0.0).unwrap(), 0.0);
        assert!((lambert_w0(E).unwrap() - 1.0).abs() < 1e-15);
        assert!((lambert_w0(-1.0 / E).unwrap() + 1.0).abs() < 1e-7);
        assert!((lambert_w0(1.0).unwrap() - 0.567_143_290_409_783_8).abs() < 1e-15);
    }

    #[test]
    fn lambert_rejects_below_branch_point() {
        assert!(matches!(lambert_w0(-0.4), Err(Error::Domain(_))));
        assert!(lambert_w0(f64::NAN).is_err());
    }

    #[test]
    fn lambert_residual_over_wide_range() {
        for k in 0..2000 {
            let z = -INV_E + (k as f64) * 0.37;
            let w = lambert_w0(z).unwrap();
            assert!(w >= -1.0);
            assert!((w * w.exp() - z).abs() <= 1e-12 * z.abs().max(1.0), "z={z}");
        }
        for &z in &[1e3, 1e8, 1e100, 1e300] {
            let w = lambert_w0(z).unwrap();
            assert!((w * w.exp() - z).abs() <= 1e-12 * z);
        }
    }

    #[test]
    fn density_endpoints() {
        let s = TimeSampler::new(0.99).unwrap();
        assert_eq!(s.density(0.0).unwrap(), 0.0);
        let knee = (0.99 / 0.01) / s.normalizer();
        assert!((s.density(0.99).unwrap() - knee).abs() < 1e-12);
        assert_eq!(s.density(0.99).unwrap(), s.density(1.0).unwrap());
        assert!(s.density(1.1).is_err());
        assert!(s.density(-0.1).is_err());
    }

    #[test]
    fn ratio_identity_below_knee() {
        let s = TimeSampler::new(0.9).unwrap();
        for k in 0..90 {
            let t = k as f64 / 100.0;
            assert_eq!(s.frozen_ratio(t), t / (1.0 - t));
        }
    }

    #[test]
    fn inverse_cdf_endpoints() {
        let s = TimeSampler::new(0.99).unwrap();
        assert!(s.inverse_cdf(0.0).unwrap().abs() < 1e-7);
        assert!((s.inverse_cdf(1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(s.inverse_cdf(1.5).is_err());
    }

    #[test]
    fn branch_point_for_z_equal_two() {
        let te = 1.0 - (-2.0f64).exp();
        let s = TimeSampler::new(te).unwrap();
        assert!((s.normalizer() - 2.0).abs() < 1e-15);
        assert!((s.u_star() - 0.567_667_641_618_306_3).abs() < 1e-12);
        let lo = s.lower_branch(s.u_star()).unwrap();
        let hi = s.upper_branch(s.u_star());
        assert!((lo - te).abs() < 1e-12);
        assert!((hi - te).abs() < 1e-12);
    }

    #[test]
    fn samples_stay_in_unit_interval() {
        let s = TimeSampler::new(0.99).unwrap();
        let mut rng = substream(0, "ts");
        for _ in 0..10_000 {
            let t = sample_time(&mut rng, &s);
            assert!((0.0..=1.0).contains(&t));
        }
    }

    #[test]
    fn exact_tail_weight_matches_ratio() {
        let s = TimeSampler::new(0.9).unwrap();
        let t = 0.95;
        let w = s.importance_weight(t, TailWeight::Exact);
        assert!((w * s.density(t).unwrap() - t / (1.0 - t)).abs() < 1e-12);
        assert_eq!(s.importance_weight(t, TailWeight::Frozen), s.normalizer());
    }
}
