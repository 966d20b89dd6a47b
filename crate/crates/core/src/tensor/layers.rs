//! Stateful layers: `forward` caches what `backward` needs, `infer` does not.
//!
//! `backward` accumulates into parameter gradients, so several samples can be
//! pushed through before one optimizer step.

use super::init::{he_uniform, LayerSeed};
use super::ops;
use super::{Param, Real, Result, Tensor, TensorError};

pub trait Layer<T: Real> {
    /// Training forward pass; caches activations for `backward`.
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// Inference forward pass; leaves the layer untouched.
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// Gradient w.r.t. the last `forward` input. Parameter grads are accumulated.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;
    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
}

fn take<T>(slot: &mut Option<T>, who: &'static str) -> Result<T> {
    slot.take().ok_or(TensorError::MissingContext(who))
}

fn accumulate<T: Real>(dst: &mut Tensor<T>, src: &[T]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d<T: Real = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv3d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, seed: LayerSeed) -> Self {
        let fan_in = cin * kernel * kernel * kernel;
        let w = he_uniform(&[cout, cin, kernel, kernel, kernel], fan_in, seed);
        Self {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad,
            input: None,
        }
    }
}

impl<T: Real> Layer<T> for Conv3d<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv3d(x, &self.weight.value, Some(self.bias.value.data()), self.stride, self.pad)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.input, "conv3d")?;
        let (gx, gw, gb) = ops::conv3d_backward(&x, &self.weight.value, self.stride, self.pad, grad_out)?;
        accumulate(&mut self.weight.grad, gw.data());
        accumulate(&mut self.bias.grad, &gb);
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution with kernel == stride (2 in the U-Net decoder).
#[derive(Clone, Debug)]
pub struct ConvTranspose3d<T: Real = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub factor: usize,
    input: Option<Tensor<T>>,
}

impl<T: Real> ConvTranspose3d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, factor: usize, seed: LayerSeed) -> Self {
        let w = he_uniform(&[cin, cout, factor, factor, factor], cin, seed);
        Self {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            factor,
            input: None,
        }
    }
}

impl<T: Real> Layer<T> for ConvTranspose3d<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv_transpose3d(x, &self.weight.value, Some(self.bias.value.data()), self.factor)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.input, "conv_transpose3d")?;
        let (gx, gw, gb) = ops::conv_transpose3d_backward(&x, &self.weight.value, self.factor, grad_out)?;
        accumulate(&mut self.weight.grad, gw.data());
        accumulate(&mut self.bias.grad, &gb);
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm3d<T: Real = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
    ctx: Option<ops::InstanceNormCtx<T>>,
}

impl<T: Real> InstanceNorm3d<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            eps: Self::DEFAULT_EPS,
            ctx: None,
        }
    }
}

impl<T: Real> Layer<T> for InstanceNorm3d<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, ctx) = ops::instance_norm3d(x, self.gamma.value.data(), self.beta.value.data(), T::lit(self.eps))?;
        self.ctx = Some(ctx);
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::instance_norm3d(x, self.gamma.value.data(), self.beta.value.data(), T::lit(self.eps))?.0)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let ctx = take(&mut self.ctx, "instance_norm3d")?;
        let (gx, gg, gb) = ops::instance_norm3d_backward(&ctx, self.gamma.value.data(), grad_out)?;
        accumulate(&mut self.gamma.grad, &gg);
        accumulate(&mut self.beta.grad, &gb);
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Leaky ReLU; `slope == 0` is a plain ReLU.
#[derive(Clone, Debug)]
pub struct LeakyRelu<T: Real = f32> {
    pub slope: f64,
    input: Option<Tensor<T>>,
}

impl<T: Real> LeakyRelu<T> {
    pub const DEFAULT_SLOPE: f64 = 0.01;

    pub fn new(slope: f64) -> Self {
        Self { slope, input: None }
    }

    pub fn relu() -> Self {
        Self::new(0.0)
    }
}

impl<T: Real> Layer<T> for LeakyRelu<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input = Some(x.clone());
        self.infer(x)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::leaky_relu(x, T::lit(self.slope)))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.input, "leaky_relu")?;
        ops::leaky_relu_backward(&x, T::lit(self.slope), grad_out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct MaxPool3d {
    ctx: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool3d {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> Layer<T> for MaxPool3d {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, arg) = ops::maxpool3d(x)?;
        self.ctx = Some((x.shape().to_vec(), arg));
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::maxpool3d(x)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = take(&mut self.ctx, "maxpool3d")?;
        ops::maxpool3d_backward(&shape, &arg, grad_out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct UpsampleNearest3d;

impl<T: Real> Layer<T> for UpsampleNearest3d {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::upsample_nearest3d(x)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::upsample_nearest3d(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        ops::upsample_nearest3d_backward(grad_out)
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T: Real = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, fin: usize, fout: usize, seed: LayerSeed) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), he_uniform(&[fout, fin], fin, seed)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[fout])),
            input: None,
        }
    }
}

impl<T: Real> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight.value, self.bias.value.data())
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.input, "linear")?;
        let (gx, gw, gb) = ops::linear_backward(&x, &self.weight.value, grad_out)?;
        accumulate(&mut self.weight.grad, gw.data());
        accumulate(&mut self.bias.grad, &gb);
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl<T: Real> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.shape = Some(x.shape().to_vec());
        ops::global_avg_pool(x)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::global_avg_pool(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = take(&mut self.shape, "global_avg_pool")?;
        ops::global_avg_pool_backward(&shape, grad_out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sigmoid<T: Real = f32> {
    output: Option<Tensor<T>>,
}

impl<T: Real> Layer<T> for Sigmoid<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::sigmoid(x);
        self.output = Some(y.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::sigmoid(x))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = take(&mut self.output, "sigmoid")?;
        ops::sigmoid_backward(&y, grad_out)
    }
}

/// Softmax over the channel axis.
#[derive(Clone, Debug, Default)]
pub struct Softmax<T: Real = f32> {
    output: Option<Tensor<T>>,
}

impl<T: Real> Layer<T> for Softmax<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::softmax_channels(x)?;
        self.output = Some(y.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::softmax_channels(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = take(&mut self.output, "softmax")?;
        ops::softmax_channels_backward(&y, grad_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckConfig};

    fn check(layer: &mut dyn Layer<f64>, shape: &[usize]) -> f64 {
        grad_check(layer, shape, &GradCheckConfig::default()).unwrap().max_rel_error
    }

    #[test]
    fn per_layer_gradients() {
        let s = |i| LayerSeed::new(7, i);
        let shape = [1, 2, 4, 4, 4];
        let cases: Vec<(&str, Box<dyn Layer<f64>>)> = vec![
            ("conv", Box::new(Conv3d::new("c", 2, 3, 3, 1, 1, s(0)))),
            ("conv_s2", Box::new(Conv3d::new("c", 2, 3, 3, 2, 1, s(1)))),
            ("tconv", Box::new(ConvTranspose3d::new("t", 2, 3, 2, s(2)))),
            ("norm", Box::new(InstanceNorm3d::new("n", 2))),
            ("leaky", Box::new(LeakyRelu::new(0.01))),
            ("pool", Box::new(MaxPool3d::new())),
            ("up", Box::new(UpsampleNearest3d)),
            ("sigmoid", Box::new(Sigmoid::default())),
            ("softmax", Box::new(Softmax::default())),
        ];
        for (name, mut l) in cases {
            let e = check(l.as_mut(), &shape);
            assert!(e < 1e-6, "{name}: {e}");
        }
    }
}
