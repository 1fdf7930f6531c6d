use ndarray::{Array2, ArrayView2};

use super::{Condition, VelocityField};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, Rng64};

/// `u_null + w (u_y - u_null)`; `w = 1` and `w = 0` return the inputs as is.
pub fn cfg_combine(guided: Array2<f64>, null: Array2<f64>, w: f64) -> Array2<f64> {
    if w == 1.0 {
        guided
    } else if w == 0.0 {
        null
    } else {
        let mut out = guided;
        out.zip_mut_with(&null, |g, &n| *g = n + w * (*g - n));
        out
    }
}

/// Classifier-free-guided velocity.
pub fn cfg_velocity(
    field: &(impl VelocityField + ?Sized),
    x: ArrayView2<'_, f64>,
    t: &[f64],
    cond: &[Condition],
    w: f64,
) -> Result<Array2<f64>> {
    if !(w >= 0.0) {
        return Err(Error::config(format!("guidance scale must be non-negative, got {w}")));
    }
    if w == 1.0 {
        return field.velocity(x, t, cond);
    }
    let (guided, null) = field.guided_and_null(x, t, cond)?;
    Ok(cfg_combine(guided, null, w))
}

/// Euler integration from `x0` over `t = 0, dt, ..., 1 - dt`, `dt = 1/steps`.
pub fn euler_sample(
    field: &(impl VelocityField + ?Sized),
    x0: Array2<f64>,
    cond: &[Condition],
    steps: usize,
    w: f64,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    let n = x.nrows();
    for k in 0..steps {
        let t = vec![k as f64 * dt; n];
        let u = cfg_velocity(field, x.view(), &t, cond, w)?;
        x.scaled_add(dt, &u);
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "euler state",
                index: k * x.len() + index,
            });
        }
    }
    Ok(x)
}

/// Draws `n` sources from `N(0, I)` and integrates them under `cond`.
pub fn sample_endpoints(
    field: &(impl VelocityField + ?Sized),
    cond: &Condition,
    n: usize,
    steps: usize,
    w: f64,
    rng: &mut Rng64,
) -> Result<Array2<f64>> {
    let x0 = standard_normal(rng, n, field.data_dim());
    euler_sample(field, x0, std::slice::from_ref(cond), steps, w)
}
