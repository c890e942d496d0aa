use super::{Layer, Observer};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential<T: Scalar> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: Box<dyn Layer<T>>) {
        self.layers.push(layer);
    }

    pub fn layers(&self) -> &[Box<dyn Layer<T>>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer<T>>] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn describe(&self) -> String {
        let parts: Vec<_> = self.layers.iter().map(|l| l.describe()).collect();
        parts.join(" -> ")
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for l in &self.layers {
            s = l.output_shape(&s)?;
        }
        Ok(s)
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut iter = self.layers.iter();
        let Some(first) = iter.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward(x)?;
        for l in iter {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut iter = self.layers.iter_mut();
        let Some(first) = iter.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward_train(x)?;
        for l in iter {
            h = l.forward_train(&h)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn buffers(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    fn param_rows(&self) -> Vec<(String, usize)> {
        self.layers.iter().flat_map(|l| l.param_rows()).collect()
    }

    fn macs(&self, input: &[usize]) -> Result<u64> {
        let mut s = input.to_vec();
        let mut total = 0;
        for l in &self.layers {
            total += l.macs(&s)?;
            s = l.output_shape(&s)?;
        }
        Ok(total)
    }

    fn forward_observed(&self, x: &Tensor<T>, obs: &mut Observer<'_, T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward_observed(&h, obs)?;
        }
        Ok(h)
    }

    fn asymmetric_pairs(&self, input: &[usize]) -> Result<Vec<(u64, u64)>> {
        let mut s = input.to_vec();
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.asymmetric_pairs(&s)?);
            s = l.output_shape(&s)?;
        }
        Ok(out)
    }
}
