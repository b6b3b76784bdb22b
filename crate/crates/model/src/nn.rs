//! Parameter containers, initialization and the layer primitives shared by
//! both networks.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Numeric mode of a model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// One entry of a parameter enumeration.
#[derive(Clone)]
pub struct NamedParam {
    pub name: String,
    pub var: Var,
    /// Whether decoupled weight decay applies (false for biases and norm parameters).
    pub decay: bool,
}

impl std::fmt::Debug for NamedParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NamedParam")
            .field("name", &self.name)
            .field("shape", &self.var.dims())
            .field("decay", &self.decay)
            .finish()
    }
}

/// Anything owning parameters, enumerated in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>);

    fn named_params(&self) -> Vec<NamedParam> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|p| p.var.elem_count()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push(out: &mut Vec<NamedParam>, prefix: &str, name: &str, var: &Var, decay: bool) {
    out.push(NamedParam {
        name: join(prefix, name),
        var: var.clone(),
        decay,
    });
}

/// Seeded parameter factory. Values are drawn in f64 and cast once, so the
/// same seed gives the same parameters in both precisions up to rounding.
pub struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
}

impl Init {
    pub fn new(seed: u64, precision: Precision) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype: precision.dtype(),
        }
    }

    pub fn from_values(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Var> {
        self.from_values(vec![0.0; shape.iter().product()], shape)
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Var> {
        self.from_values(vec![1.0; shape.iter().product()], shape)
    }

    /// Normal samples truncated to two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                values.push(z * std);
            }
        }
        self.from_values(values, shape)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.from_values(values, shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    Replicate,
}

/// 2-D convolution on NCHW tensors with square kernels.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: Padding,
}

impl Conv2d {
    pub fn new(init: &mut Init, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = (cin * k * k) as f64;
        Ok(Self {
            weight: init.trunc_normal(&[cout, cin, k, k], (1.0 / fan_in).sqrt())?,
            bias: init.zeros(&[cout])?,
            stride,
            padding: k / 2,
            pad_mode: Padding::Zeros,
        })
    }

    pub fn zeroed(init: &Init, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: init.zeros(&[cout, cin, k, k])?,
            bias: init.zeros(&[cout])?,
            stride: 1,
            padding: k / 2,
            pad_mode: Padding::Zeros,
        })
    }

    pub fn replicate(mut self) -> Self {
        self.pad_mode = Padding::Replicate;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (x, pad) = match self.pad_mode {
            Padding::Zeros => (x.clone(), self.padding),
            Padding::Replicate if self.padding > 0 => (
                x.pad_with_same(2, self.padding, self.padding)?
                    .pad_with_same(3, self.padding, self.padding)?,
                0,
            ),
            Padding::Replicate => (x.clone(), 0),
        };
        Ok(crate::kernels::conv2d(
            &x,
            self.weight.as_tensor(),
            self.bias.as_tensor(),
            self.stride,
            pad,
        )?)
    }
}

impl Params for Conv2d {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        push(out, prefix, "weight", &self.weight, true);
        push(out, prefix, "bias", &self.bias, false);
    }
}

/// Affine map over the last dimension.
#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.trunc_normal(&[fan_out, fan_in], 0.02)?,
            bias: init.zeros(&[fan_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / fan_in;
        let w = self.weight.as_tensor();
        let y = x
            .reshape((rows, fan_in))?
            .matmul(&w.t()?)?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = w.dims()[0];
        Ok(y.reshape(out_dims)?)
    }

    pub fn zero(&self) -> Result<()> {
        self.weight.set(&self.weight.zeros_like()?)?;
        self.bias.set(&self.bias.zeros_like()?)?;
        Ok(())
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        push(out, prefix, "weight", &self.weight, true);
        push(out, prefix, "bias", &self.bias, false);
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(init: &Init, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.ones(&[dim])?,
            beta: init.zeros(&[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        push(out, prefix, "gamma", &self.gamma, false);
        push(out, prefix, "beta", &self.beta, false);
    }
}

/// GELU, tanh form. Maps 0 to 0 and is smooth everywhere.
pub fn act(x: &Tensor) -> Result<Tensor> {
    Ok(crate::kernels::gelu(x)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// NCHW to NHWC.
pub fn to_channels_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}

/// NHWC to NCHW.
pub fn to_channels_first(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Copies every parameter value, detached from its variable.
pub fn snapshot(params: &[NamedParam]) -> Result<Vec<Tensor>> {
    params
        .iter()
        .map(|p| Ok(p.var.as_tensor().copy()?))
        .collect()
}

pub fn restore(params: &[NamedParam], values: &[Tensor]) -> Result<()> {
    for (p, v) in params.iter().zip(values) {
        p.var.set(v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let a = Init::new(3, Precision::F64).trunc_normal(&[500], 0.02).unwrap();
        let b = Init::new(3, Precision::F64).trunc_normal(&[500], 0.02).unwrap();
        let va = a.as_tensor().to_vec1::<f64>().unwrap();
        assert_eq!(va, b.as_tensor().to_vec1::<f64>().unwrap());
        assert!(va.iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -5.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let init = Init::new(0, Precision::F64);
        let ln = LayerNorm::new(&init, 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 3.5 / (3.5 + LN_EPS)).abs() < 1e-9);
    }

    #[test]
    fn replicate_padding_keeps_constants() {
        let mut init = Init::new(1, Precision::F64);
        let conv = Conv2d::new(&mut init, 2, 3, 3, 1).unwrap().replicate();
        let x = Tensor::full(2.0f64, (1, 2, 5, 6), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 3, 5, 6]);
        let w = conv.weight.as_tensor().sum((1, 2, 3)).unwrap().to_vec1::<f64>().unwrap();
        let out = y.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        for (c, plane) in out.iter().enumerate() {
            for row in plane {
                for v in row {
                    assert!((v - 2.0 * w[c]).abs() < 1e-12);
                }
            }
        }
    }
}
