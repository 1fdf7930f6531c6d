use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::codec::{ConditionCodec, ConditionSpace};
use super::{check_batch, cond_at, Condition, VelocityField};
use crate::error::{check_dim, Error, Result};
use crate::nn::{peek_version, Activation, DenseNet, NetDocument};

pub const FLOW_FORMAT_VERSION: u32 = 1;

/// Number of sinusoid frequencies in the time features.
const TIME_FREQUENCIES: usize = 4;
const TIME_FEATURES: usize = 1 + 2 * TIME_FREQUENCIES;

fn time_features(t: f64, out: &mut [f64]) {
    out[0] = t;
    for k in 0..TIME_FREQUENCIES {
        let arg = std::f64::consts::PI * (1u32 << k) as f64 * t;
        out[1 + 2 * k] = arg.sin();
        out[2 + 2 * k] = arg.cos();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowArch {
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
    pub embed_dim: usize,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            width: 128,
            activation: Activation::Tanh,
            embed_dim: 16,
        }
    }
}

/// Velocity network `u(x, y, t)` over `[x, time features, embedding(y)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    net: DenseNet,
    codec: ConditionCodec,
    data_dim: usize,
    p_uncond: f64,
}

impl FlowModel {
    pub fn new(
        arch: &FlowArch,
        space: ConditionSpace,
        data_dim: usize,
        p_uncond: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if arch.hidden_layers == 0 || arch.width == 0 {
            return Err(Error::config("flow network needs at least one hidden layer"));
        }
        let codec = ConditionCodec::new(space, arch.embed_dim, rng)?;
        let mut dims = vec![data_dim + TIME_FEATURES + arch.embed_dim];
        dims.extend(std::iter::repeat_n(arch.width, arch.hidden_layers));
        dims.push(data_dim);
        let mut acts = vec![arch.activation; arch.hidden_layers];
        acts.push(Activation::Identity);
        let net = DenseNet::new(&dims, &acts, rng)?;
        Self::from_parts(net, codec, data_dim, p_uncond)
    }

    pub fn from_parts(net: DenseNet, codec: ConditionCodec, data_dim: usize, p_uncond: f64) -> Result<Self> {
        check_dim("flow output", data_dim, net.output_dim())?;
        check_dim(
            "flow input",
            data_dim + TIME_FEATURES + codec.embed_dim(),
            net.input_dim(),
        )?;
        if !(0.0..1.0).contains(&p_uncond) {
            return Err(Error::config(format!("p_uncond must lie in [0, 1), got {p_uncond}")));
        }
        Ok(Self {
            net,
            codec,
            data_dim,
            p_uncond,
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn codec(&self) -> &ConditionCodec {
        &self.codec
    }

    pub fn p_uncond(&self) -> f64 {
        self.p_uncond
    }

    pub fn condition_space(&self) -> &ConditionSpace {
        self.codec.space()
    }

    pub fn num_params(&self) -> usize {
        self.net.params().len() + self.codec.params().len()
    }

    /// Network parameters followed by codec parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(self.net.params());
        p.extend_from_slice(self.codec.params());
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim("flat parameter count", self.num_params(), p.len())?;
        let n = self.net.params().len();
        self.net.params_mut().copy_from_slice(&p[..n]);
        self.codec.params_mut().copy_from_slice(&p[n..]);
        Ok(())
    }

    pub(crate) fn assemble_input(&self, x: ArrayView2<'_, f64>, t: &[f64], cond: &[Condition]) -> Result<Array2<f64>> {
        check_batch(x, self.data_dim, t, cond)?;
        for c in cond {
            self.codec.check(c)?;
        }
        let d = self.data_dim;
        let e = self.codec.embed_dim();
        let mut input = Array2::zeros((x.nrows(), d + TIME_FEATURES + e));
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            for (dst, src) in row[..d].iter_mut().zip(x.row(i)) {
                *dst = *src;
            }
            time_features(t[i], &mut row[d..d + TIME_FEATURES]);
            self.codec.encode_into(cond_at(cond, i), &mut row[d + TIME_FEATURES..]);
        }
        Ok(input)
    }

    /// Loss and flat gradient for a velocity regression target.
    /// `loss_fn` gets the predicted velocities and returns per-row losses and
    /// the gradient of their sum.
    pub(crate) fn regression_grad<F>(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        cond: &[Condition],
        loss_fn: F,
    ) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>),
    {
        let input = self.assemble_input(x, t, cond)?;
        let g = crate::nn::gradient(&self.net, input.view(), loss_fn)?;
        let mut grads = g.params;
        let mut codec_grads = vec![0.0; self.codec.params().len()];
        let start = self.data_dim + TIME_FEATURES;
        let d_embed = g.input.slice(s![.., start..]).as_standard_layout().into_owned();
        self.codec.backward(cond, &d_embed, &mut codec_grads);
        grads.extend(codec_grads);
        Ok((g.loss, grads))
    }

    pub fn to_document(&self, rng_seed: Option<u64>) -> FlowDocument {
        FlowDocument {
            format_version: FLOW_FORMAT_VERSION,
            data_dim: self.data_dim,
            p_uncond: self.p_uncond,
            condition_space: self.codec.space().clone(),
            embed_dim: self.codec.embed_dim(),
            codec_params: self.codec.params().to_vec(),
            net: self.net.to_document(rng_seed),
            rng_seed,
        }
    }

    pub fn from_document(doc: FlowDocument) -> Result<Self> {
        if doc.format_version != FLOW_FORMAT_VERSION {
            return Err(Error::Version {
                found: doc.format_version,
                expected: FLOW_FORMAT_VERSION,
            });
        }
        let codec = ConditionCodec::from_parts(doc.condition_space, doc.embed_dim, doc.codec_params)?;
        let net = DenseNet::from_document(doc.net)?;
        Self::from_parts(net, codec, doc.data_dim, doc.p_uncond)
    }

    pub fn to_json(&self, rng_seed: Option<u64>) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document(rng_seed))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("not a JSON document: {e}")))?;
        let found = peek_version(&value)?;
        if found != FLOW_FORMAT_VERSION {
            return Err(Error::Version {
                found,
                expected: FLOW_FORMAT_VERSION,
            });
        }
        let doc: FlowDocument = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn save(&self, path: &Path, rng_seed: Option<u64>) -> Result<()> {
        std::fs::write(path, self.to_json(rng_seed)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl VelocityField for FlowModel {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, t: &[f64], cond: &[Condition]) -> Result<Array2<f64>> {
        let input = self.assemble_input(x, t, cond)?;
        self.net.forward_batch(input.view())
    }

    fn guided_and_null(
        &self,
        x: ArrayView2<'_, f64>,
        t: &[f64],
        cond: &[Condition],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        // one stacked pass: rows [0, n) guided, [n, 2n) null
        let n = x.nrows();
        let xx = ndarray::concatenate(ndarray::Axis(0), &[x, x]).expect("same width");
        let tt: Vec<f64> = t.iter().chain(t).copied().collect();
        let cc: Vec<Condition> = (0..n)
            .map(|i| cond_at(cond, i).clone())
            .chain(std::iter::repeat_n(Condition::Null, n))
            .collect();
        check_batch(x, self.data_dim, t, cond)?;
        let out = self.velocity(xx.view(), &tt, &cc)?;
        Ok((out.slice(s![..n, ..]).to_owned(), out.slice(s![n.., ..]).to_owned()))
    }
}

/// Serialized form of a [`FlowModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDocument {
    pub format_version: u32,
    pub data_dim: usize,
    pub p_uncond: f64,
    pub condition_space: ConditionSpace,
    pub embed_dim: usize,
    pub codec_params: Vec<f64>,
    pub net: NetDocument,
    pub rng_seed: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn small(space: ConditionSpace) -> FlowModel {
        let arch = FlowArch {
            hidden_layers: 2,
            width: 8,
            activation: Activation::Tanh,
            embed_dim: 3,
        };
        FlowModel::new(&arch, space, 2, 0.1, &mut substream(0, "flow-model")).unwrap()
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = small(ConditionSpace::Continuous { dim: 1 });
        let back = FlowModel::from_json(&m.to_json(Some(5)).unwrap()).unwrap();
        assert_eq!(m, back);
        let a = m.flat_params();
        let b = back.flat_params();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let m = small(ConditionSpace::Labels { count: 2 });
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json(None).unwrap()).unwrap();
        v["format_version"] = 2.into();
        let err = FlowModel::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Version { found: 2, expected: 1 }));
        assert!(matches!(FlowModel::from_json("{ nope"), Err(Error::Format(_))));
    }

    #[test]
    fn stacked_pass_matches_separate_calls() {
        let m = small(ConditionSpace::Labels { count: 2 });
        let x = ndarray::array![[0.1, -0.3], [1.0, 2.0], [0.0, 0.5]];
        let t = [0.0, 0.5, 0.9];
        let cond = [Condition::Label(0), Condition::Label(1), Condition::Null];
        let (g, n) = m.guided_and_null(x.view(), &t, &cond).unwrap();
        let g2 = m.velocity(x.view(), &t, &cond).unwrap();
        let n2 = m.velocity(x.view(), &t, &[Condition::Null]).unwrap();
        assert!((&g - &g2).iter().all(|v| v.abs() < 1e-14));
        assert!((&n - &n2).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut m = small(ConditionSpace::Labels { count: 3 });
        let mut p = m.flat_params();
        p[0] = 42.0;
        *p.last_mut().unwrap() = -7.0;
        m.set_flat_params(&p).unwrap();
        assert_eq!(m.flat_params(), p);
        assert!(m.set_flat_params(&p[1..]).is_err());
    }
}
