use rand::Rng;

use super::{fan_in_normal, missing_cache, zero_param, Layer, Observer};
use crate::error::{Error, Result};
use crate::ops::activation::Activation;
use crate::ops::batchnorm::{batchnorm_backward, batchnorm_eval, batchnorm_train, BatchNormState, BnCache};
use crate::ops::conv::{conv2d_backward, conv2d_forward, Conv2dGeometry};
use crate::ops::linear::{linear, linear_backward};
use crate::ops::pool::{maxpool2d_backward, maxpool2d_forward, maxpool2d_values, Pool2dGeometry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn chw(input: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *input {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape("layer", format!("{what} input rank"), 3, input.len())),
    }
}

pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geometry: Conv2dGeometry,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, geometry: Conv2dGeometry, rng: &mut R) -> Self {
        let fan_in = in_channels * geometry.kh * geometry.kw;
        Conv2d {
            weight: fan_in_normal(&[out_channels, in_channels, geometry.kh, geometry.kw], fan_in, rng),
            bias: zero_param(&[out_channels]),
            geometry,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn describe(&self) -> String {
        let g = &self.geometry;
        format!("conv {}x{}/{} {}->{}", g.kh, g.kw, g.stride, self.in_channels(), self.out_channels())
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (c, h, w) = chw(input, "conv")?;
        if c != self.in_channels() {
            return Err(Error::shape("conv2d", "input channels", self.in_channels(), c));
        }
        let (oh, ow) = self.geometry.output_hw(h, w)?;
        Ok(vec![self.out_channels(), oh, ow])
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(x, &self.weight, &self.bias, self.geometry)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("conv2d"))?;
        let g = conv2d_backward(&x, &self.weight, self.geometry, grad)?;
        self.weight.accumulate_grad(&g.weight);
        self.bias.accumulate_grad(&g.bias);
        Ok(g.input)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn macs(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let per_pixel = self.geometry.kh * self.geometry.kw * self.in_channels();
        Ok((out.iter().product::<usize>() * per_pixel) as u64)
    }
}

pub struct MaxPool2d {
    pub geometry: Pool2dGeometry,
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool2d {
    pub fn new(geometry: Pool2dGeometry) -> Self {
        MaxPool2d { geometry, cache: None }
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn describe(&self) -> String {
        format!("max pool {}x{}/{}", self.geometry.kh, self.geometry.kw, self.geometry.stride)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (c, h, w) = chw(input, "pool")?;
        let (oh, ow) = self.geometry.output_hw(h, w)?;
        Ok(vec![c, oh, ow])
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        maxpool2d_values(x, self.geometry)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, arg) = maxpool2d_forward(x, self.geometry)?;
        self.cache = Some((x.shape().to_vec(), arg));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self.cache.take().ok_or_else(|| missing_cache("maxpool2d"))?;
        maxpool2d_backward(&shape, &arg, grad)
    }

    fn macs(&self, _input: &[usize]) -> Result<u64> {
        Ok(0)
    }
}

/// Elementwise nonlinearity backed by a registered [`Activation`].
pub struct ActivationLayer<T: Scalar> {
    act: Box<dyn Activation<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ActivationLayer<T> {
    pub fn new(act: Box<dyn Activation<T>>) -> Self {
        ActivationLayer { act, input: None }
    }

    pub fn activation(&self) -> &dyn Activation<T> {
        self.act.as_ref()
    }
}

impl<T: Scalar> Layer<T> for ActivationLayer<T> {
    fn describe(&self) -> String {
        self.act.name().to_string()
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.act.forward(x);
        y.ensure_finite("activation")?;
        Ok(y)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("activation"))?;
        Ok(self.act.backward(&x, grad))
    }

    fn macs(&self, _input: &[usize]) -> Result<u64> {
        Ok(0)
    }

    fn forward_observed(&self, x: &Tensor<T>, obs: &mut Observer<'_, T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        obs(self.act.name(), &y);
        Ok(y)
    }
}

/// Batch normalization over the channel axis of `[N, C]` or `[N, C, H, W]` inputs.
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub state: BatchNormState,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Tensor::full(&[channels], T::one());
        gamma.track_grad();
        BatchNorm2d {
            gamma,
            beta: zero_param(&[channels]),
            state: BatchNormState::new(channels),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn describe(&self) -> String {
        format!("batchnorm {}", self.gamma.len())
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.first() != Some(&self.gamma.len()) {
            return Err(Error::shape("batchnorm", "channels", self.gamma.len(), format!("{input:?}")));
        }
        Ok(input.to_vec())
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batchnorm_eval(x, &self.gamma, &self.beta, &self.state)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = batchnorm_train(x, &self.gamma, &self.beta, &mut self.state)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm"))?;
        let (dx, dg, db) = batchnorm_backward(&cache, &self.gamma, grad)?;
        self.gamma.accumulate_grad(&dg);
        self.beta.accumulate_grad(&db);
        Ok(dx)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&[f64]> {
        vec![&self.state.running_mean, &self.state.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.state.running_mean, &mut self.state.running_var]
    }

    fn macs(&self, _input: &[usize]) -> Result<u64> {
        Ok(0)
    }
}

/// `[N, C, H, W]` to `[N, C·H·W]`.
#[derive(Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl<T: Scalar> Layer<T> for Flatten {
    fn describe(&self) -> String {
        "flatten".into()
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(vec![input.iter().product()])
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.clone().reshape(&[x.batch(), x.sample_len()])
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input_shape = Some(x.shape().to_vec());
        Layer::<T>::forward(self, x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.take().ok_or_else(|| missing_cache("flatten"))?;
        grad.clone().reshape(&shape)
    }

    fn macs(&self, _input: &[usize]) -> Result<u64> {
        Ok(0)
    }
}

pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            weight: fan_in_normal(&[in_features, out_features], in_features, rng),
            bias: zero_param(&[out_features]),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn describe(&self) -> String {
        format!("linear {}->{}", self.in_features(), self.out_features())
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input != [self.in_features()] {
            return Err(Error::shape("linear", "input features", self.in_features(), format!("{input:?}")));
        }
        Ok(vec![self.out_features()])
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight, &self.bias)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("linear"))?;
        let (dx, dw, db) = linear_backward(&x, &self.weight, grad)?;
        self.weight.accumulate_grad(&dw);
        self.bias.accumulate_grad(&db);
        Ok(dx)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn macs(&self, _input: &[usize]) -> Result<u64> {
        Ok((self.in_features() * self.out_features()) as u64)
    }
}

/// Convolution followed by optional batch normalization and optional activation.
pub struct ConvUnit<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm2d<T>>,
    pub act: Option<ActivationLayer<T>>,
}

impl<T: Scalar> ConvUnit<T> {
    pub fn new(conv: Conv2d<T>, bn: bool, act: Option<Box<dyn Activation<T>>>) -> Self {
        let bn = bn.then(|| BatchNorm2d::new(conv.out_channels()));
        ConvUnit {
            conv,
            bn,
            act: act.map(ActivationLayer::new),
        }
    }
}

impl<T: Scalar> Layer<T> for ConvUnit<T> {
    fn describe(&self) -> String {
        let mut s = self.conv.describe();
        if self.bn.is_some() {
            s.push_str(" +bn");
        }
        if let Some(a) = &self.act {
            s.push_str(" +");
            s.push_str(&a.describe());
        }
        s
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.conv.output_shape(input)
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.conv.forward(x)?;
        if let Some(bn) = &self.bn {
            h = bn.forward(&h)?;
        }
        if let Some(a) = &self.act {
            a.activation().apply_in_place(h.data_mut());
            h.ensure_finite("activation")?;
        }
        Ok(h)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.conv.forward_train(x)?;
        if let Some(bn) = &mut self.bn {
            h = bn.forward_train(&h)?;
        }
        if let Some(a) = &mut self.act {
            h = a.forward_train(&h)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = match &mut self.act {
            Some(a) => a.backward(grad)?,
            None => grad.clone(),
        };
        if let Some(bn) = &mut self.bn {
            g = bn.backward(&g)?;
        }
        self.conv.backward(&g)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.conv.params();
        if let Some(bn) = &self.bn {
            p.extend(bn.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.conv.params_mut();
        if let Some(bn) = &mut self.bn {
            p.extend(bn.params_mut());
        }
        p
    }

    fn buffers(&self) -> Vec<&[f64]> {
        self.bn.as_ref().map(|b| b.buffers()).unwrap_or_default()
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.bn.as_mut().map(|b| b.buffers_mut()).unwrap_or_default()
    }

    fn macs(&self, input: &[usize]) -> Result<u64> {
        self.conv.macs(input)
    }

    fn forward_observed(&self, x: &Tensor<T>, obs: &mut Observer<'_, T>) -> Result<Tensor<T>> {
        let mut h = self.conv.forward(x)?;
        if let Some(bn) = &self.bn {
            h = bn.forward(&h)?;
        }
        match &self.act {
            Some(a) => a.forward_observed(&h, obs),
            None => Ok(h),
        }
    }
}
