//! Layer abstraction and the concrete layers the classifiers are assembled from.
//!
//! A [`Layer`] owns its parameters and, during training, the intermediate values
//! its backward pass needs. Inference through [`Layer::forward`] takes `&self`,
//! so one set of weights can serve many threads.

mod layers;
mod sequential;

pub use layers::{ActivationLayer, BatchNorm2d, Conv2d, ConvUnit, Flatten, Linear, MaxPool2d};
pub use sequential::Sequential;

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Callback receiving `(layer name, post-activation tensor)` during an observed forward pass.
pub type Observer<'a, T> = dyn FnMut(&str, &Tensor<T>) + 'a;

pub trait Layer<T: Scalar>: Send + Sync {
    /// Human-readable description, e.g. `conv 3x3/2 3->32`.
    fn describe(&self) -> String;

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    /// Inference pass; no state is retained.
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Training pass; caches what [`Layer::backward`] needs and updates running statistics.
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Consumes the cache of the last training pass, accumulates parameter
    /// gradients and returns the gradient w.r.t. the layer input.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&self) -> Vec<&Tensor<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Vec::new()
    }

    /// Multiply-accumulates for one sample of the given per-sample input shape.
    fn macs(&self, input: &[usize]) -> Result<u64>;

    /// Inference pass that reports every activation output to `obs`.
    fn forward_observed(&self, x: &Tensor<T>, obs: &mut Observer<'_, T>) -> Result<Tensor<T>> {
        let _ = obs;
        self.forward(x)
    }

    /// Non-trainable state (batch-norm running statistics), in a stable order.
    fn buffers(&self) -> Vec<&[f64]> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        Vec::new()
    }

    /// Parameter counts broken down the way the classifier tables list them.
    fn param_rows(&self) -> Vec<(String, usize)> {
        let n: usize = self.params().iter().map(|p| p.len()).sum();
        if n == 0 {
            Vec::new()
        } else {
            vec![(self.describe(), n)]
        }
    }

    /// Asymmetric 1×3/3×1 convolution pairs contained in this layer, as
    /// `(pair MACs, MACs of the 3×3 with the same channels)` per sample.
    fn asymmetric_pairs(&self, input: &[usize]) -> Result<Vec<(u64, u64)>> {
        let _ = input;
        Ok(Vec::new())
    }
}

pub fn param_count<T: Scalar>(layer: &dyn Layer<T>) -> usize {
    layer.params().iter().map(|p| p.len()).sum()
}

/// Normal draws with variance `1 / fan_in`.
pub(crate) fn fan_in_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let mut t = Tensor::randn(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng);
    t.track_grad();
    t
}

pub(crate) fn zero_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    t.track_grad();
    t
}

pub(crate) fn missing_cache(layer: &str) -> crate::Error {
    crate::Error::Config(format!("{layer}: backward called without a preceding training pass"))
}
