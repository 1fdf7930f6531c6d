//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat buffer so optimizers, serialization and
//! composite models can treat them uniformly. Layer `l` stores its weight
//! matrix (`dims[l] x dims[l + 1]`, row-major) followed by its bias.

mod optim;

pub use optim::{AdamW, AdamWConfig, StepInfo};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const NET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Identity => {}
        }
    }

    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Layer outputs recorded by a forward pass; `layers[0]` is the input.
#[derive(Clone, Debug)]
pub struct Trace {
    layers: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.layers.last().expect("trace holds the input").view()
    }
}

/// Result of [`gradient`].
#[derive(Clone, Debug)]
pub struct Gradient {
    pub loss: f64,
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(dims, activations)?;
        for l in 0..net.num_layers() {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = net.offsets(l);
            for p in &mut net.params[w..w + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        Self::from_parts(dims.to_vec(), activations.to_vec(), vec![0.0; param_count(dims)])
    }

    pub fn from_parts(dims: Vec<usize>, activations: Vec<Activation>, params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("network needs at least two nonzero dims, got {dims:?}")));
        }
        check_dim("activation count", dims.len() - 1, activations.len())?;
        check_dim("parameter count", param_count(&dims), params.len())?;
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                context: "network parameters",
                index: i,
            });
        }
        Ok(Self {
            dims,
            activations,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self, layer: usize) -> (usize, usize) {
        let start = param_count(&self.dims[..=layer]);
        (start, start + self.dims[layer] * self.dims[layer + 1])
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (w, b) = self.offsets(layer);
        ArrayView2::from_shape((self.dims[layer], self.dims[layer + 1]), &self.params[w..b])
            .expect("layout matches dims")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (_, b) = self.offsets(layer);
        ArrayView1::from(&self.params[b..b + self.dims[layer + 1]])
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass over the rows of `x`.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let mut a = x.to_owned();
        for (l, act) in self.activations.iter().enumerate() {
            let mut z = a.dot(&self.weights(l));
            z += &self.bias(l);
            act.apply(&mut z);
            a = z;
        }
        Ok(a)
    }

    pub fn forward_trace(&self, x: ArrayView2<'_, f64>) -> Result<Trace> {
        check_dim("network input", self.input_dim(), x.ncols())?;
        let mut layers = Vec::with_capacity(self.num_layers() + 1);
        layers.push(x.to_owned());
        for (l, act) in self.activations.iter().enumerate() {
            let mut z = layers[l].dot(&self.weights(l));
            z += &self.bias(l);
            act.apply(&mut z);
            layers.push(z);
        }
        Ok(Trace { layers })
    }

    /// Back-propagates `d_output` (gradient of the total loss w.r.t. the
    /// network output) through a recorded pass. Returns parameter gradients
    /// in the flat layout and the gradient w.r.t. the input rows.
    pub fn backward(&self, trace: &Trace, d_output: ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = d_output.to_owned();
        for l in (0..self.num_layers()).rev() {
            let act = self.activations[l];
            if act != Activation::Identity {
                delta.zip_mut_with(&trace.layers[l + 1], |d, &a| *d *= act.grad_from_output(a));
            }
            let (w, b) = self.offsets(l);
            let dw = trace.layers[l].t().dot(&delta);
            for (dst, src) in grads[w..b].iter_mut().zip(dw.iter()) {
                *dst = *src;
            }
            let db = delta.sum_axis(Axis(0));
            for (dst, src) in grads[b..b + self.dims[l + 1]].iter_mut().zip(db.iter()) {
                *dst = *src;
            }
            delta = delta.dot(&self.weights(l).t());
        }
        (grads, delta)
    }

    pub fn to_document(&self, rng_seed: Option<u64>) -> NetDocument {
        NetDocument {
            format_version: NET_FORMAT_VERSION,
            dims: self.dims.clone(),
            activations: self.activations.clone(),
            params: self.params.clone(),
            rng_seed,
        }
    }

    pub fn from_document(doc: NetDocument) -> Result<Self> {
        if doc.format_version != NET_FORMAT_VERSION {
            return Err(Error::Version {
                found: doc.format_version,
                expected: NET_FORMAT_VERSION,
            });
        }
        Self::from_parts(doc.dims, doc.activations, doc.params)
    }
}

/// Evaluates `loss` on the network output for the rows of `input` and
/// returns the loss with its gradients.
///
/// `loss` returns one loss term per row plus the gradient of their sum with
/// respect to the output. A non-finite row term is reported with its index.
pub fn gradient<F>(net: &DenseNet, input: ArrayView2<'_, f64>, loss: F) -> Result<Gradient>
where
    F: FnOnce(ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>),
{
    let trace = net.forward_trace(input)?;
    let (terms, d_out) = loss(trace.output());
    if let Some(index) = terms.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "loss",
            index,
        });
    }
    check_dim("loss gradient rows", input.nrows(), d_out.nrows())?;
    check_dim("loss gradient cols", net.output_dim(), d_out.ncols())?;
    let (params, input_grad) = net.backward(&trace, d_out.view());
    Ok(Gradient {
        loss: terms.iter().sum(),
        params,
        input: input_grad,
    })
}

/// Serialized form of a [`DenseNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetDocument {
    pub format_version: u32,
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub params: Vec<f64>,
    pub rng_seed: Option<u64>,
}

/// Reads `format_version` before the rest of a JSON document so that a
/// version mismatch is reported as such rather than as a schema error.
pub(crate) fn peek_version(value: &serde_json::Value) -> Result<u32> {
    value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .map(|v| v as u32)
        .ok_or_else(|| Error::Format("missing format_version".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::{array, Array1};

    fn reference_forward(net: &DenseNet, input: &[f64]) -> Vec<f64> {
        let mut a = input.to_vec();
        for l in 0..net.num_layers() {
            let w = net.weights(l);
            let b = net.bias(l);
            let mut next = vec![0.0; w.ncols()];
            for (j, out) in next.iter_mut().enumerate() {
                let mut s = b[j];
                for (i, ai) in a.iter().enumerate() {
                    s += ai * w[[i, j]];
                }
                *out = net.activations()[l].eval(s);
            }
            a = next;
        }
        a
    }

    #[test]
    fn zero_weights_give_activated_bias() {
        let mut net = DenseNet::zeros(&[3, 2], &[Activation::Tanh]).unwrap();
        let (_, b) = net.offsets(0);
        net.params_mut()[b] = 0.3;
        net.params_mut()[b + 1] = -1.2;
        let out = net.forward(&[5.0, -2.0, 7.0]).unwrap();
        assert_eq!(out, vec![0.3f64.tanh(), (-1.2f64).tanh()]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = DenseNet::zeros(&[3, 3], &[Activation::Identity]).unwrap();
        for i in 0..3 {
            net.params_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn forward_matches_reference_loop() {
        let mut rng = substream(0, "nn-test");
        let net = DenseNet::new(&[4, 16, 3], &[Activation::Tanh, Activation::Tanh], &mut rng).unwrap();
        let input = [0.3, -1.1, 2.0, 0.7];
        let got = net.forward(&input).unwrap();
        let want = reference_forward(&net, &input);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn input_dimension_is_checked() {
        let net = DenseNet::zeros(&[3, 2], &[Activation::Tanh]).unwrap();
        let err = net.forward(&[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 3, got: 2, .. }));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut rng = substream(1, "nn-test");
        let net = DenseNet::new(&[2, 5, 1], &[Activation::Tanh, Activation::Identity], &mut rng).unwrap();
        let x = array![[0.5, -0.5], [1.0, 2.0]];
        let g = gradient(&net, x.view(), |out| (vec![3.0; out.nrows()], Array2::zeros(out.raw_dim()))).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_squared_error_gradient_is_closed_form() {
        let mut rng = substream(2, "nn-test");
        let net = DenseNet::new(&[3, 2], &[Activation::Identity], &mut rng).unwrap();
        let x = array![0.4, -1.3, 2.2];
        let y = array![0.5, -0.25];
        let g = gradient(&net, x.view().insert_axis(Axis(0)), |out| {
            let r = &out.row(0) - &y;
            (vec![r.dot(&r)], (2.0 * &r).insert_axis(Axis(0)))
        })
        .unwrap();
        // r = W^T x + b - y with the row-major (in x out) layout
        let r: Array1<f64> = x.dot(&net.weights(0)) + net.bias(0) - &y;
        for i in 0..3 {
            for j in 0..2 {
                assert!((g.params[i * 2 + j] - 2.0 * r[j] * x[i]).abs() < 1e-14);
            }
        }
        for j in 0..2 {
            assert!((g.params[6 + j] - 2.0 * r[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_loss_reports_row() {
        let net = DenseNet::zeros(&[1, 1], &[Activation::Identity]).unwrap();
        let x = array![[1.0], [2.0], [3.0]];
        let err = gradient(&net, x.view(), |out| {
            (vec![0.0, f64::NAN, 0.0], Array2::zeros(out.raw_dim()))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn document_round_trip_is_bit_exact() {
        let mut rng = substream(3, "nn-test");
        let net = DenseNet::new(&[3, 7, 2], &[Activation::Relu, Activation::Identity], &mut rng).unwrap();
        let json = serde_json::to_string(&net.to_document(Some(3))).unwrap();
        let back = DenseNet::from_document(serde_json::from_str(&json).unwrap()).unwrap();
        assert!(net.params().iter().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(net, back);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let net = DenseNet::zeros(&[1, 1], &[Activation::Identity]).unwrap();
        let mut doc = net.to_document(None);
        doc.format_version = 9;
        assert!(matches!(DenseNet::from_document(doc), Err(Error::Version { found: 9, .. })));
    }
}
