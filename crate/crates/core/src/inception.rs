//! Modified Inception block with asymmetric 1×3 / 3×1 filters and a bridge residual.
//!
//! ```text
//!           ┌─ 1x1 reduce ─ 1x3 ─ 3x3 ──────────┐
//!           ├─ 1x1 reduce ─ 3x1 ─ 3x3 ──────────┤ concat ─ 1x1 projection ─┐
//!  input ───┼─ max pool 4x4/1 ─ 1x1 ─ 5x5 ──────┘                          (+)── output
//!           └─ 1x1 bridge ───────────────────────────────────────────────────┘
//! ```
//!
//! Every convolution except the bridge is followed by the configured activation.
//! Spatial extent is preserved.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvUnit, Layer, MaxPool2d, Observer};
use crate::ops::activation::Activation;
use crate::ops::conv::Conv2dGeometry;
use crate::ops::pool::Pool2dGeometry;
use crate::scalar::Scalar;
use crate::tensor::{dims4, Tensor};

/// Channel widths of one block, one field per column of the classifier tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionConfig {
    pub in_channels: usize,
    pub reduce1_1x1: usize,
    pub branch_a_1x3: usize,
    pub branch_a_3x3: usize,
    pub reduce2_1x1: usize,
    pub branch_b_3x1: usize,
    pub branch_b_3x3: usize,
    pub residual_1x1: usize,
    pub conv_5x5: usize,
    pub bridge_residual: usize,
    pub out_channels: usize,
}

impl InceptionConfig {
    /// Widths in table column order, starting after the input channel count.
    #[allow(clippy::too_many_arguments)]
    pub fn from_columns(in_channels: usize, widths: [usize; 9], out_channels: usize) -> Self {
        let [r1, a13, a33, r2, b31, b33, res, c55, bridge] = widths;
        InceptionConfig {
            in_channels,
            reduce1_1x1: r1,
            branch_a_1x3: a13,
            branch_a_3x3: a33,
            reduce2_1x1: r2,
            branch_b_3x1: b31,
            branch_b_3x3: b33,
            residual_1x1: res,
            conv_5x5: c55,
            bridge_residual: bridge,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.in_channels,
            self.reduce1_1x1,
            self.branch_a_1x3,
            self.branch_a_3x3,
            self.reduce2_1x1,
            self.branch_b_3x1,
            self.branch_b_3x3,
            self.residual_1x1,
            self.conv_5x5,
            self.bridge_residual,
            self.out_channels,
        ];
        if widths.contains(&0) {
            return Err(Error::Config(format!("inception widths must all be >= 1: {self:?}")));
        }
        if self.bridge_residual != self.out_channels {
            return Err(Error::Config(format!(
                "bridge residual width {} cannot be added to {} output channels",
                self.bridge_residual, self.out_channels
            )));
        }
        Ok(())
    }

    /// Channels entering the projection.
    pub fn concat_channels(&self) -> usize {
        self.branch_a_3x3 + self.branch_b_3x3 + self.conv_5x5
    }
}

pub struct InceptionBlock<T: Scalar> {
    pub config: InceptionConfig,
    pub branch_a: [ConvUnit<T>; 3],
    pub branch_b: [ConvUnit<T>; 3],
    pub pool: MaxPool2d,
    pub branch_c: [ConvUnit<T>; 2],
    pub projection: ConvUnit<T>,
    pub bridge: ConvUnit<T>,
}

/// Builds a block; `act` is called once per activated convolution.
pub fn build_inception<T: Scalar, R: Rng + ?Sized>(
    cfg: InceptionConfig,
    act: &dyn Fn() -> Result<Box<dyn Activation<T>>>,
    batchnorm: bool,
    rng: &mut R,
) -> Result<InceptionBlock<T>> {
    cfg.validate()?;
    let mut unit = |cin: usize, cout: usize, kh: usize, kw: usize| -> Result<ConvUnit<T>> {
        let conv = Conv2d::new(cin, cout, Conv2dGeometry::same(kh, kw), rng);
        Ok(ConvUnit::new(conv, batchnorm, Some(act()?)))
    };
    let branch_a = [
        unit(cfg.in_channels, cfg.reduce1_1x1, 1, 1)?,
        unit(cfg.reduce1_1x1, cfg.branch_a_1x3, 1, 3)?,
        unit(cfg.branch_a_1x3, cfg.branch_a_3x3, 3, 3)?,
    ];
    let branch_b = [
        unit(cfg.in_channels, cfg.reduce2_1x1, 1, 1)?,
        unit(cfg.reduce2_1x1, cfg.branch_b_3x1, 3, 1)?,
        unit(cfg.branch_b_3x1, cfg.branch_b_3x3, 3, 3)?,
    ];
    let branch_c = [
        unit(cfg.in_channels, cfg.residual_1x1, 1, 1)?,
        unit(cfg.residual_1x1, cfg.conv_5x5, 5, 5)?,
    ];
    let projection = unit(cfg.concat_channels(), cfg.out_channels, 1, 1)?;
    let bridge = ConvUnit::new(
        Conv2d::new(cfg.in_channels, cfg.bridge_residual, Conv2dGeometry::same(1, 1), rng),
        false,
        None,
    );
    Ok(InceptionBlock {
        config: cfg,
        branch_a,
        branch_b,
        pool: MaxPool2d::new(Pool2dGeometry::same(4, 4)),
        branch_c,
        projection,
        bridge,
    })
}

/// Concatenates `[N, Ci, H, W]` tensors along the channel axis.
pub(crate) fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (n, _, h, w) = dims4(parts[0], "concat")?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = dims4(p, "concat")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape("concat", "batch/spatial", format!("{n}x{h}x{w}"), format!("{pn}x{ph}x{pw}")));
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for p in parts {
            let per = p.shape()[1] * plane;
            out.extend_from_slice(&p.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::from_vec(&[n, total_c, h, w], out)
}

/// Inverse of [`concat_channels`].
pub(crate) fn split_channels<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = dims4(x, "split")?;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::shape("split", "channels", c, widths.iter().sum::<usize>()));
    }
    let plane = h * w;
    let mut outs: Vec<Vec<T>> = widths.iter().map(|wc| Vec::with_capacity(n * wc * plane)).collect();
    for b in 0..n {
        let mut off = b * c * plane;
        for (o, wc) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&x.data()[off..off + wc * plane]);
            off += wc * plane;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &wc)| Tensor::from_vec(&[n, wc, h, w], d))
        .collect()
}

pub(crate) fn add_into<T: Scalar>(acc: &mut Tensor<T>, other: &Tensor<T>) -> Result<()> {
    if acc.shape() != other.shape() {
        return Err(Error::shape(
            "add",
            "shape",
            format!("{:?}", acc.shape()),
            format!("{:?}", other.shape()),
        ));
    }
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a = *a + *b;
    }
    Ok(())
}

impl<T: Scalar> InceptionBlock<T> {
    fn units(&self) -> impl Iterator<Item = &ConvUnit<T>> {
        self.branch_a
            .iter()
            .chain(&self.branch_b)
            .chain(&self.branch_c)
            .chain([&self.projection, &self.bridge])
    }

    fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvUnit<T>> {
        self.branch_a
            .iter_mut()
            .chain(&mut self.branch_b)
            .chain(&mut self.branch_c)
            .chain([&mut self.projection, &mut self.bridge])
    }

    fn check_input(&self, input: &[usize]) -> Result<(usize, usize)> {
        match *input {
            [c, h, w] if c == self.config.in_channels => Ok((h, w)),
            [c, _, _] => Err(Error::shape("inception", "input channels", self.config.in_channels, c)),
            _ => Err(Error::shape("inception", "input rank", 3, input.len())),
        }
    }

    fn run(
        &self,
        x: &Tensor<T>,
        obs: &mut Option<&mut Observer<'_, T>>,
    ) -> Result<Tensor<T>> {
        let chain = |units: &[ConvUnit<T>], input: &Tensor<T>, obs: &mut Option<&mut Observer<'_, T>>| {
            let mut h = input.clone();
            for u in units {
                h = match obs {
                    Some(o) => u.forward_observed(&h, *o)?,
                    None => u.forward(&h)?,
                };
            }
            Ok::<_, Error>(h)
        };
        let a = chain(&self.branch_a, x, obs)?;
        let b = chain(&self.branch_b, x, obs)?;
        let pooled = Layer::<T>::forward(&self.pool, x)?;
        let c = chain(&self.branch_c, &pooled, obs)?;
        let cat = concat_channels(&[&a, &b, &c])?;
        let mut y = chain(std::slice::from_ref(&self.projection), &cat, obs)?;
        add_into(&mut y, &self.bridge.forward(x)?)?;
        Ok(y)
    }
}

impl<T: Scalar> Layer<T> for InceptionBlock<T> {
    fn describe(&self) -> String {
        format!("inception {}->{}", self.config.in_channels, self.config.out_channels)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (h, w) = self.check_input(input)?;
        Ok(vec![self.config.out_channels, h, w])
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, &mut None)
    }

    fn forward_observed(&self, x: &Tensor<T>, obs: &mut Observer<'_, T>) -> Result<Tensor<T>> {
        self.run(x, &mut Some(obs))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut a = x.clone();
        for u in &mut self.branch_a {
            a = u.forward_train(&a)?;
        }
        let mut b = x.clone();
        for u in &mut self.branch_b {
            b = u.forward_train(&b)?;
        }
        let mut c = Layer::<T>::forward_train(&mut self.pool, x)?;
        for u in &mut self.branch_c {
            c = u.forward_train(&c)?;
        }
        let cat = concat_channels(&[&a, &b, &c])?;
        let mut y = self.projection.forward_train(&cat)?;
        add_into(&mut y, &self.bridge.forward_train(x)?)?;
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut dx = self.bridge.backward(grad)?;
        let dcat = self.projection.backward(grad)?;
        let cfg = self.config;
        let parts = split_channels(&dcat, &[cfg.branch_a_3x3, cfg.branch_b_3x3, cfg.conv_5x5])?;
        let [da, db, dc]: [Tensor<T>; 3] = parts.try_into().map_err(|_| Error::Config("split arity".into()))?;
        let mut g = da;
        for u in self.branch_a.iter_mut().rev() {
            g = u.backward(&g)?;
        }
        add_into(&mut dx, &g)?;
        let mut g = db;
        for u in self.branch_b.iter_mut().rev() {
            g = u.backward(&g)?;
        }
        add_into(&mut dx, &g)?;
        let mut g = dc;
        for u in self.branch_c.iter_mut().rev() {
            g = u.backward(&g)?;
        }
        let g = Layer::<T>::backward(&mut self.pool, &g)?;
        add_into(&mut dx, &g)?;
        Ok(dx)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        self.units().flat_map(|u| u.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.units_mut().flat_map(|u| u.params_mut()).collect()
    }

    fn buffers(&self) -> Vec<&[f64]> {
        self.units().flat_map(|u| u.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.units_mut().flat_map(|u| u.buffers_mut()).collect()
    }

    fn macs(&self, input: &[usize]) -> Result<u64> {
        let (h, w) = self.check_input(input)?;
        let cfg = &self.config;
        let mut total = 0;
        let mut shape = vec![cfg.in_channels, h, w];
        for u in &self.branch_a {
            total += u.macs(&shape)?;
            shape = u.output_shape(&shape)?;
        }
        shape = vec![cfg.in_channels, h, w];
        for u in &self.branch_b {
            total += u.macs(&shape)?;
            shape = u.output_shape(&shape)?;
        }
        shape = vec![cfg.in_channels, h, w];
        for u in &self.branch_c {
            total += u.macs(&shape)?;
            shape = u.output_shape(&shape)?;
        }
        total += self.projection.macs(&[cfg.concat_channels(), h, w])?;
        total += self.bridge.macs(&[cfg.in_channels, h, w])?;
        Ok(total)
    }

    fn asymmetric_pairs(&self, input: &[usize]) -> Result<Vec<(u64, u64)>> {
        let (h, w) = self.check_input(input)?;
        let a = &self.branch_a[1].conv;
        let b = &self.branch_b[1].conv;
        let pixels = (h * w) as u64;
        let pair = a.macs(&[a.in_channels(), h, w])? + b.macs(&[b.in_channels(), h, w])?;
        // the single 3x3 the pair stands in for, at branch A's channel widths
        let square = 9 * (a.in_channels() * a.out_channels()) as u64 * pixels;
        Ok(vec![(pair, square)])
    }
}
