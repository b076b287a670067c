//! Small dense networks with hand-written reverse mode, Adam, and a
//! mean-pooled Deep Set built from two of them.

mod adam;
mod deep_set;
mod weights;

pub use adam::{Adam, AdamConfig};
pub use deep_set::{DeepSet, DeepSetCache, DeepSetGrad, SetBatch};
pub use weights::{load_weights, read_weights, save_weights, write_weights, NetLayout, WeightHeader};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

/// `tanh` through a range-reduced exponential. Branch-free so that loops
/// over activations vectorize; absolute error stays within a few units of
/// 1e−16. This is the activation's definition everywhere in the crate.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5·2⁵² rounds to an integer held in the low mantissa bits.
    const ROUND: f64 = 6_755_399_441_055_744.0;
    // 1/i! for i = 0..=13
    const C: [f64; 14] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5_040.0,
        1.0 / 40_320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    // exp(2|x|) = 2^k · e^r with |r| ≤ ln2/2 and a degree-13 Taylor
    // polynomial in Estrin form (short dependency chains); tanh(20) is 1 in
    // double precision.
    let y = 2.0 * x.abs().min(20.0);
    let shifted = y * std::f64::consts::LOG2_E + ROUND;
    let k = shifted - ROUND;
    let r = (y - k * LN2_HI) - k * LN2_LO;
    let r2 = r * r;
    let r4 = r2 * r2;
    let pair = |i: usize| C[i] + C[i + 1] * r;
    let q0 = pair(0) + pair(2) * r2;
    let q1 = pair(4) + pair(6) * r2;
    let q2 = pair(8) + pair(10) * r2;
    let p = (q0 + q1 * r4) + (q2 + pair(12) * r4) * (r4 * r4);
    let k_bits = shifted.to_bits().wrapping_sub(ROUND.to_bits());
    let e = p * f64::from_bits(k_bits.wrapping_add(1023) << 52);
    let t = (1.0 - 2.0 / (e + 1.0)).copysign(x);
    if x.is_nan() {
        x
    } else {
        t
    }
}

fn tanh_scalar(xs: &mut [f64]) {
    xs.iter_mut().for_each(|v| *v = tanh(*v));
}

// Same arithmetic as the scalar loop (no FMA contraction), so every path
// produces identical bits; only the vector width differs.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
fn tanh_avx512(xs: &mut [f64]) {
    xs.iter_mut().for_each(|v| *v = tanh(*v));
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn tanh_avx2(xs: &mut [f64]) {
    xs.iter_mut().for_each(|v| *v = tanh(*v));
}

/// [`tanh`] over a slice, using the widest vector unit available.
pub fn tanh_in_place(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected on this CPU.
            return unsafe { tanh_avx512(xs) };
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected on this CPU.
            return unsafe { tanh_avx2(xs) };
        }
    }
    tanh_scalar(xs)
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => match z.as_slice_mut() {
                Some(xs) => tanh_in_place(xs),
                None => z.mapv_inplace(tanh),
            },
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Multiplies `d` in place by the derivative, expressed through the
    /// layer output `y`.
    fn backprop(self, d: &mut Array2<f64>, y: &Array2<f64>) {
        match self {
            Activation::Tanh => d.zip_mut_with(y, |g, &o| *g *= 1.0 - o * o),
            Activation::Relu => d.zip_mut_with(y, |g, &o| {
                if o <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Identity => {}
        }
    }
}

/// Access to every parameter array of a network, in a fixed order.
pub trait Tensors {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `inputs × outputs`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }
}

/// Layer sizes and activations of an MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Parameter gradients of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weights: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array2<f64>,
    outputs: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().unwrap_or(&self.input)
    }
}

impl Mlp {
    /// `sizes = [d0, d1, .., dk]`; hidden layers use `hidden`, the last
    /// layer uses `head`. Xavier-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        head: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let k = sizes.len() - 1;
        let layers = (0..k)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a)),
                    bias: Array1::zeros(fan_out),
                    activation: if i + 1 == k { head } else { hidden },
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn from_specs(specs: &[LayerSpec]) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| Layer {
                weights: Array2::zeros((s.inputs, s.outputs)),
                bias: Array1::zeros(s.outputs),
                activation: s.activation,
            })
            .collect();
        let mlp = Mlp { layers };
        mlp.check()?;
        Ok(mlp)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec {
                inputs: l.inputs(),
                outputs: l.outputs(),
                activation: l.activation,
            })
            .collect()
    }

    fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::DimensionMismatch("network without layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i} emits {} values, layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs())
    }

    /// Batch forward pass; rows of `x` are independent samples.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<MlpCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let prev = outputs.last().map_or(x, |o| o.view());
            let mut z = prev.dot(&layer.weights);
            z += &layer.bias;
            layer.activation.apply(&mut z);
            outputs.push(z);
        }
        Ok(MlpCache {
            input: x.to_owned(),
            outputs,
        })
    }

    /// Output only, without keeping intermediates.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(x).map(|mut c| c.outputs.pop().expect("non-empty network"))
    }

    fn backward_impl(
        &self,
        cache: &MlpCache,
        upstream: ArrayView2<f64>,
        mut grads: Option<&mut MlpGrad>,
    ) -> Result<Array2<f64>> {
        if cache.outputs.len() != self.layers.len() || upstream.dim() != cache.output().dim() {
            return Err(Error::DimensionMismatch(
                "upstream gradient does not match the cached forward pass".into(),
            ));
        }
        let mut d = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&mut d, &cache.outputs[i]);
            let input = if i == 0 { &cache.input } else { &cache.outputs[i - 1] };
            if let Some(g) = grads.as_deref_mut() {
                g.weights[i] += &input.t().dot(&d);
                g.bias[i] += &d.sum_axis(Axis(0));
            }
            d = d.dot(&layer.weights.t());
        }
        Ok(d)
    }

    /// Reverse pass. Returns the gradient w.r.t. the input batch and the
    /// parameter gradients summed over the batch.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, MlpGrad)> {
        let mut grads = self.zero_grad();
        let dx = self.backward_impl(cache, upstream, Some(&mut grads))?;
        Ok((dx, grads))
    }

    /// Like [`Mlp::backward`] but accumulates into `grads`.
    pub fn backward_into(
        &self,
        cache: &MlpCache,
        upstream: ArrayView2<f64>,
        grads: &mut MlpGrad,
    ) -> Result<Array2<f64>> {
        self.backward_impl(cache, upstream, Some(grads))
    }

    /// Gradient w.r.t. the input only; parameters are treated as constants.
    pub fn backward_input(&self, cache: &MlpCache, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.backward_impl(cache, upstream, None)
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            weights: self.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            bias: self.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are stored contiguously")
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored contiguously")
}

impl Tensors for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [slice(&l.weights), slice(&l.bias)])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [slice_mut(&mut l.weights), slice_mut(&mut l.bias)])
            .collect()
    }
}

impl Tensors for MlpGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| [slice(w), slice(b)])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.bias.iter_mut())
            .flat_map(|(w, b)| [slice_mut(w), slice_mut(b)])
            .collect()
    }
}

impl MlpGrad {
    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}
