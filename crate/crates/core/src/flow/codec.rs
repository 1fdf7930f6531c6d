use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Condition;
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConditionSpace {
    /// Finite label set `0..count`.
    Labels { count: usize },
    /// Real vectors of length `dim`.
    Continuous { dim: usize },
}

/// Maps conditions to embedding vectors.
///
/// Labels use one learned row each; continuous values go through a learned
/// affine map. The null condition always has its own learned vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionCodec {
    space: ConditionSpace,
    embed_dim: usize,
    params: Vec<f64>,
}

impl ConditionCodec {
    pub fn new(space: ConditionSpace, embed_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut codec = Self::zeros(space, embed_dim)?;
        match codec.space {
            ConditionSpace::Labels { .. } => {
                for p in &mut codec.params {
                    *p = rng.random_range(-1.0..1.0);
                }
            }
            ConditionSpace::Continuous { dim } => {
                let bound = (6.0 / (dim + embed_dim) as f64).sqrt();
                let (w_end, b_end) = (dim * embed_dim, dim * embed_dim + embed_dim);
                for p in &mut codec.params[..w_end] {
                    *p = rng.random_range(-bound..bound);
                }
                for p in &mut codec.params[b_end..] {
                    *p = rng.random_range(-1.0..1.0);
                }
            }
        }
        Ok(codec)
    }

    pub fn zeros(space: ConditionSpace, embed_dim: usize) -> Result<Self> {
        let n = Self::param_len(&space, embed_dim)?;
        Ok(Self {
            space,
            embed_dim,
            params: vec![0.0; n],
        })
    }

    pub fn from_parts(space: ConditionSpace, embed_dim: usize, params: Vec<f64>) -> Result<Self> {
        check_dim("codec parameter count", Self::param_len(&space, embed_dim)?, params.len())?;
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                context: "codec parameters",
                index,
            });
        }
        Ok(Self {
            space,
            embed_dim,
            params,
        })
    }

    fn param_len(space: &ConditionSpace, embed_dim: usize) -> Result<usize> {
        if embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        match *space {
            ConditionSpace::Labels { count } if count > 0 => Ok((count + 1) * embed_dim),
            ConditionSpace::Continuous { dim } if dim > 0 => Ok((dim + 2) * embed_dim),
            _ => Err(Error::config(format!("empty condition space {space:?}"))),
        }
    }

    pub fn space(&self) -> &ConditionSpace {
        &self.space
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offset of the null embedding inside the parameter buffer.
    pub fn null_offset(&self) -> usize {
        match self.space {
            ConditionSpace::Labels { count } => count * self.embed_dim,
            ConditionSpace::Continuous { dim } => (dim + 1) * self.embed_dim,
        }
    }

    pub fn check(&self, cond: &Condition) -> Result<()> {
        match (&self.space, cond) {
            (_, Condition::Null) => Ok(()),
            (ConditionSpace::Labels { count }, Condition::Label(l)) if l < count => Ok(()),
            (ConditionSpace::Continuous { dim }, Condition::Value(v)) if v.len() == *dim => Ok(()),
            _ => Err(Error::Domain(format!(
                "condition {cond:?} does not belong to {:?}",
                self.space
            ))),
        }
    }

    /// Writes the embedding of `cond` into `out`.
    pub fn encode_into(&self, cond: &Condition, out: &mut [f64]) {
        let e = self.embed_dim;
        match (cond, &self.space) {
            (Condition::Null, _) => {
                let o = self.null_offset();
                out.copy_from_slice(&self.params[o..o + e]);
            }
            (Condition::Label(l), _) => out.copy_from_slice(&self.params[l * e..(l + 1) * e]),
            (Condition::Value(v), ConditionSpace::Continuous { dim }) => {
                let b = dim * e;
                out.copy_from_slice(&self.params[b..b + e]);
                for (i, vi) in v.iter().enumerate() {
                    for (o, w) in out.iter_mut().zip(&self.params[i * e..(i + 1) * e]) {
                        *o += vi * w;
                    }
                }
            }
            (Condition::Value(_), ConditionSpace::Labels { .. }) => unreachable!("checked by caller"),
        }
    }

    /// Accumulates the parameter gradient given `d_embed`, the loss gradient
    /// w.r.t. each row's embedding.
    pub fn backward(&self, cond: &[Condition], d_embed: &Array2<f64>, grads: &mut [f64]) {
        let e = self.embed_dim;
        for (i, row) in d_embed.rows().into_iter().enumerate() {
            let c = super::cond_at(cond, i);
            let row = row.as_slice().expect("standard layout");
            match (c, &self.space) {
                (Condition::Null, _) => {
                    let o = self.null_offset();
                    add(&mut grads[o..o + e], row, 1.0);
                }
                (Condition::Label(l), _) => add(&mut grads[l * e..(l + 1) * e], row, 1.0),
                (Condition::Value(v), ConditionSpace::Continuous { dim }) => {
                    let b = dim * e;
                    add(&mut grads[b..b + e], row, 1.0);
                    for (k, vk) in v.iter().enumerate() {
                        add(&mut grads[k * e..(k + 1) * e], row, *vk);
                    }
                }
                (Condition::Value(_), ConditionSpace::Labels { .. }) => unreachable!("checked by caller"),
            }
        }
    }
}

fn add(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}
