use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::task::{sample_pair, MITask};
use crate::error::{Error, Result};
use crate::mi::{EstimatorTag, MIEstimate};
use crate::nn::{Activation, AdamW, AdamWConfig, DenseNet};
use crate::rng::{substream, Rng64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfoNceConfig {
    pub hidden_layers: usize,
    pub width: usize,
    /// Length of the critic feature vectors `g(x)` and `h(y)`.
    pub embed_dim: usize,
    /// Pairs per batch; the estimate is capped at `ln K`.
    pub batch_k: usize,
    pub steps: usize,
    pub optimizer: AdamWConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            width: 128,
            embed_dim: 32,
            batch_k: 256,
            steps: 3000,
            optimizer: AdamWConfig::default(),
            n_train: 50_000,
            n_test: 5_000,
            seed: 0,
        }
    }
}

impl InfoNceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_k < 2 {
            return Err(Error::config(format!("batch_k must be at least 2, got {}", self.batch_k)));
        }
        if self.n_test < self.batch_k {
            return Err(Error::config("n_test must hold at least one batch"));
        }
        if self.steps == 0 || self.n_train == 0 || self.width == 0 || self.embed_dim == 0 {
            return Err(Error::config("steps, n_train, width and embed_dim must be positive"));
        }
        self.optimizer.validate()
    }
}

/// Separable critic `f(x, y) = g(x) . h(y)`.
#[derive(Clone, Debug)]
pub struct Critic {
    pub g: DenseNet,
    pub h: DenseNet,
}

impl Critic {
    pub fn new(x_dim: usize, y_dim: usize, config: &InfoNceConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut tower = |input: usize| {
            let mut dims = vec![input];
            dims.extend(std::iter::repeat_n(config.width, config.hidden_layers));
            dims.push(config.embed_dim);
            let mut acts = vec![Activation::Tanh; config.hidden_layers];
            acts.push(Activation::Identity);
            DenseNet::new(&dims, &acts, rng)
        };
        let g = tower(x_dim)?;
        let h = tower(y_dim)?;
        Ok(Self { g, h })
    }

    pub fn scores(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.g.forward_batch(x)?.dot(&self.h.forward_batch(y)?.t()))
    }
}

/// `mean_i [S_ii - logsumexp_j S_ij] + ln K` and its gradient with respect to `S`.
pub fn infonce_bound(scores: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let k = scores.nrows();
    let mut grad = Array2::zeros((k, k));
    let mut total = 0.0;
    for (i, row) in scores.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += row[i] - lse;
        for (j, &v) in row.iter().enumerate() {
            grad[[i, j]] = -(v - lse).exp() / k as f64;
        }
        grad[[i, i]] += 1.0 / k as f64;
    }
    (total / k as f64 + (k as f64).ln(), grad)
}

fn train_critic(critic: &mut Critic, x: &Array2<f64>, y: &Array2<f64>, config: &InfoNceConfig, rng: &mut Rng64) -> Result<()> {
    let n_g = critic.g.params().len();
    let mut opt = AdamW::new(config.optimizer, n_g + critic.h.params().len())?;
    let mut params: Vec<f64> = critic.g.params().iter().chain(critic.h.params()).copied().collect();
    let mut recent = Vec::new();
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_k).map(|_| rng.random_range(0..x.nrows())).collect();
        let xb = x.select(Axis(0), &idx);
        let yb = y.select(Axis(0), &idx);
        let tg = critic.g.forward_trace(xb.view())?;
        let th = critic.h.forward_trace(yb.view())?;
        let (gx, hy) = (tg.output(), th.output());
        let (bound, d_scores) = infonce_bound(gx.dot(&hy.t()).view());
        recent.push(bound);
        if recent.len() > 10 {
            recent.remove(0);
        }
        if !bound.is_finite() {
            return Err(Error::Diverged {
                iteration: step,
                last_losses: recent.iter().map(|b| -b).collect(),
            });
        }
        // Ascend the bound: descend on its negative.
        let d_g = -d_scores.dot(&hy);
        let d_h = -d_scores.t().dot(&gx);
        let (grad_g, _) = critic.g.backward(&tg, d_g.view());
        let (grad_h, _) = critic.h.backward(&th, d_h.view());
        let grads: Vec<f64> = grad_g.into_iter().chain(grad_h).collect();
        opt.step(&mut params, &grads).map_err(|e| {
            if e.is_numerical() {
                Error::Diverged {
                    iteration: step,
                    last_losses: recent.iter().map(|b| -b).collect(),
                }
            } else {
                e
            }
        })?;
        critic.g.params_mut().copy_from_slice(&params[..n_g]);
        critic.h.params_mut().copy_from_slice(&params[n_g..]);
    }
    Ok(())
}

/// InfoNCE lower bound from a critic trained on in-batch negatives and
/// evaluated on consecutive held-out batches of `K` pairs.
pub fn infonce_estimate(task: &MITask, config: &InfoNceConfig) -> Result<MIEstimate> {
    config.validate()?;
    let start = Instant::now();
    let (x, y) = sample_pair(task, &mut substream(config.seed, "infonce-train"), config.n_train)?;
    let (xt, yt) = sample_pair(task, &mut substream(config.seed, "infonce-test"), config.n_test)?;
    let mut critic = Critic::new(x.ncols(), y.ncols(), config, &mut substream(config.seed, "infonce-init"))?;
    train_critic(&mut critic, &x, &y, config, &mut substream(config.seed, "infonce-steps"))?;

    let k = config.batch_k;
    let batches = config.n_test / k;
    let values = (0..batches)
        .map(|b| {
            let rows = s![b * k..(b + 1) * k, ..];
            let scores = critic.scores(xt.slice(rows), yt.slice(rows))?;
            Ok(infonce_bound(scores.view()).0)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (value, stderr) = crate::mi::mean_and_stderr(&values);
    Ok(MIEstimate {
        value,
        stderr,
        n_y: batches * k,
        n_t: 0,
        n_x: k,
        seed: config.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        estimator_tag: EstimatorTag::Infonce,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{make_task, TaskSpec};
    use ndarray::array;

    #[test]
    fn bound_of_a_diagonal_critic_approaches_ln_k() {
        let k = 8;
        let mut s = Array2::zeros((k, k));
        for i in 0..k {
            s[[i, i]] = 50.0;
        }
        let (v, _) = infonce_bound(s.view());
        assert!(v <= (k as f64).ln() + 1e-12);
        assert!(((k as f64).ln() - v).abs() < 1e-9);
    }

    #[test]
    fn constant_scores_give_zero() {
        let (v, g) = infonce_bound(Array2::from_elem((5, 5), 3.0).view());
        assert!(v.abs() < 1e-14);
        // Each row's gradient sums to zero.
        for row in g.rows() {
            assert!(row.sum().abs() < 1e-15);
        }
    }

    #[test]
    fn bound_gradient_matches_finite_differences() {
        let s = array![[0.3, -1.0, 2.0], [0.5, 0.1, -0.7], [1.5, 0.2, 0.0]];
        let (_, g) = infonce_bound(s.view());
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut up = s.clone();
                up[[i, j]] += h;
                let mut dn = s.clone();
                dn[[i, j]] -= h;
                let fd = (infonce_bound(up.view()).0 - infonce_bound(dn.view()).0) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn independent_task_gives_no_signal() {
        let task = make_task("ind", TaskSpec::CorrelatedGaussian { rho: vec![0.0] }).unwrap();
        let cfg = InfoNceConfig {
            steps: 300,
            batch_k: 64,
            width: 32,
            n_train: 5_000,
            n_test: 2_048,
            ..InfoNceConfig::default()
        };
        let e = infonce_estimate(&task, &cfg).unwrap();
        assert!(e.value <= 0.05, "{}", e.value);
        assert!(e.value <= (64f64).ln() + 1e-9);
    }

    #[test]
    fn small_batch_is_rejected() {
        let task = make_task("ind", TaskSpec::CorrelatedGaussian { rho: vec![0.0] }).unwrap();
        let cfg = InfoNceConfig {
            batch_k: 1,
            ..InfoNceConfig::default()
        };
        assert!(matches!(infonce_estimate(&task, &cfg), Err(Error::Config(_))));
    }
}
