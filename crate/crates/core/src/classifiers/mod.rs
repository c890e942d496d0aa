//! The zone classifier (phase I gate) and the pedestrian classifier (phase II
//! window scorer), built from declarative [`NetworkSpec`]s.

mod head;
pub mod weights;

pub use head::{Combine, DualHead};
pub use weights::{load_weights, load_weights_into, save_weights};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inception::{build_inception, InceptionConfig};
use crate::nn::{ConvUnit, Conv2d, Flatten, Layer, Linear, MaxPool2d, Observer, Sequential};
use crate::ops::activation::Activation;
use crate::ops::conv::Conv2dGeometry;
use crate::ops::loss::softmax;
use crate::ops::pool::Pool2dGeometry;
use crate::registry::ActivationRegistry;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Side length of the square RGB input both classifiers take.
pub const INPUT_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Inception(InceptionConfig),
    Flatten,
    Head {
        hidden: Vec<usize>,
        residual: usize,
        combine: Combine,
    },
    Linear {
        out_features: usize,
    },
}

/// Declarative classifier layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input shape `[channels, height, width]`.
    pub input: [usize; 3],
    pub activation: String,
    pub batchnorm: bool,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub activation: String,
    pub batchnorm: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            activation: "selu".into(),
            batchnorm: false,
        }
    }
}

fn pool() -> LayerSpec {
    LayerSpec::MaxPool {
        kernel: 4,
        stride: 2,
        padding: 1,
    }
}

/// Zone classifier layout.
pub fn zone_classifier_spec(opts: &BuildOptions) -> NetworkSpec {
    NetworkSpec {
        name: "zone".into(),
        input: [3, INPUT_SIZE, INPUT_SIZE],
        activation: opts.activation.clone(),
        batchnorm: opts.batchnorm,
        layers: vec![
            LayerSpec::Conv {
                out_channels: 32,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            pool(),
            LayerSpec::Inception(InceptionConfig::from_columns(32, [16, 8, 16, 16, 8, 16, 32, 32, 64], 64)),
            pool(),
            // the table lists a bridge of 128 here; the bridge is added to the
            // 96-channel output so it must be 96 wide
            LayerSpec::Inception(InceptionConfig::from_columns(64, [32, 16, 32, 32, 16, 32, 64, 64, 96], 96)),
            pool(),
            LayerSpec::Flatten,
            LayerSpec::Head {
                hidden: vec![128],
                residual: 128,
                combine: Combine::Concat,
            },
            LayerSpec::Linear { out_features: 2 },
        ],
    }
}

/// Pedestrian classifier layout.
pub fn pedestrian_classifier_spec(opts: &BuildOptions) -> NetworkSpec {
    let inc = |cin, w: [usize; 8], out| {
        let [a, b, c, d, e, f, g, h] = w;
        LayerSpec::Inception(InceptionConfig::from_columns(cin, [a, b, c, d, e, f, g, h, out], out))
    };
    NetworkSpec {
        name: "pedestrian".into(),
        input: [3, INPUT_SIZE, INPUT_SIZE],
        activation: opts.activation.clone(),
        batchnorm: opts.batchnorm,
        layers: vec![
            LayerSpec::Conv {
                out_channels: 32,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            pool(),
            inc(32, [32, 16, 32, 32, 16, 32, 16, 16], 64),
            pool(),
            inc(64, [48, 32, 48, 48, 32, 48, 32, 32], 128),
            inc(128, [48, 32, 48, 48, 32, 48, 32, 32], 128),
            pool(),
            inc(128, [80, 40, 80, 80, 40, 80, 40, 40], 200),
            inc(200, [80, 40, 80, 80, 40, 80, 40, 40], 200),
            pool(),
            LayerSpec::Flatten,
            LayerSpec::Head {
                hidden: vec![512, 256],
                residual: 256,
                combine: Combine::Add,
            },
            LayerSpec::Linear { out_features: 2 },
        ],
    }
}

pub fn build_zone_classifier(seed: u64) -> Result<Network<f32>> {
    Network::build(&zone_classifier_spec(&BuildOptions::default()), seed)
}

pub fn build_pedestrian_classifier(seed: u64) -> Result<Network<f32>> {
    Network::build(&pedestrian_classifier_spec(&BuildOptions::default()), seed)
}

/// A built classifier: spec plus the layer stack it describes.
pub struct Network<T: Scalar = f32> {
    spec: NetworkSpec,
    body: Sequential<T>,
}

impl<T: Scalar> Network<T> {
    /// Builds with the built-in activation registry and a seeded fan-in initialization.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        Self::build_with(spec, seed, &ActivationRegistry::builtin())
    }

    pub fn build_with(spec: &NetworkSpec, seed: u64, registry: &ActivationRegistry<T>) -> Result<Self> {
        registry.create(&spec.activation)?;
        let act = || registry.create(&spec.activation);
        let act: &dyn Fn() -> Result<Box<dyn Activation<T>>> = &act;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut body = Sequential::new();
        let mut shape = spec.input.to_vec();
        for (i, ls) in spec.layers.iter().enumerate() {
            let last = i + 1 == spec.layers.len();
            let layer: Box<dyn Layer<T>> = match ls {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let geom = Conv2dGeometry::new(*kernel, *kernel, *stride, *padding);
                    let conv = Conv2d::new(shape[0], *out_channels, geom, &mut rng);
                    Box::new(ConvUnit::new(conv, spec.batchnorm, Some(act()?)))
                }
                LayerSpec::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => Box::new(MaxPool2d::new(Pool2dGeometry::new(*kernel, *kernel, *stride, *padding))),
                LayerSpec::Inception(cfg) => {
                    if cfg.in_channels != shape[0] {
                        return Err(Error::Config(format!(
                            "{}: layer {i} expects {} channels but receives {}",
                            spec.name, cfg.in_channels, shape[0]
                        )));
                    }
                    Box::new(build_inception(*cfg, act, spec.batchnorm, &mut rng)?)
                }
                LayerSpec::Flatten => Box::new(Flatten::default()),
                LayerSpec::Head {
                    hidden,
                    residual,
                    combine,
                } => {
                    let features = single_dim(&shape, &spec.name, i)?;
                    Box::new(DualHead::new(features, hidden, *residual, *combine, act, &mut rng)?)
                }
                LayerSpec::Linear { out_features } => {
                    let features = single_dim(&shape, &spec.name, i)?;
                    Box::new(Linear::new(features, *out_features, &mut rng))
                }
            };
            shape = layer.output_shape(&shape)?;
            if last && shape != [2] {
                return Err(Error::Config(format!("{} must end in 2 logits, ends in {shape:?}", spec.name)));
            }
            body.push(layer);
        }
        Ok(Network { spec: spec.clone(), body })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Box<dyn Layer<T>>] {
        self.body.layers()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 4 || x.shape()[1..] != self.spec.input {
            return Err(Error::shape(
                "network",
                format!("{} input", self.spec.name),
                format!("[N, {}, {}, {}]", self.spec.input[0], self.spec.input[1], self.spec.input[2]),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Logits `[N, 2]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.body.forward(x)
    }

    /// Softmax class probabilities `[N, 2]`.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        softmax(&self.forward(x)?)
    }

    /// Probability of the positive class (index 1) for every sample.
    pub fn positive_scores(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let p = self.predict_proba(x)?;
        Ok(p.data().chunks(2).map(|r| r[1].as_f64()).collect())
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.body.forward_train(x)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.body.backward(grad)
    }

    /// Inference pass reporting every activation output.
    pub fn forward_observed(&self, x: &Tensor<T>, obs: &mut Observer<'_, T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.body.forward_observed(x, obs)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.body.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.body.params_mut()
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        self.body.buffers()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.body.buffers_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Exact count of trainable scalars, biases included.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Per-row parameter counts in table order.
    pub fn param_rows(&self) -> Vec<(String, usize)> {
        self.body.param_rows()
    }

    /// Parameter and multiply-accumulate totals for one input of `height × width`.
    pub fn cost_report(&self, height: usize, width: usize) -> Result<CostReport> {
        let mut shape = vec![self.spec.input[0], height, width];
        let mut layers = Vec::new();
        let mut asymmetric = Vec::new();
        for l in self.body.layers() {
            let macs = l.macs(&shape)?;
            asymmetric.extend(l.asymmetric_pairs(&shape)?);
            shape = l.output_shape(&shape)?;
            layers.push(LayerCost {
                layer: l.describe(),
                params: l.params().iter().map(|p| p.len()).sum(),
                macs,
                output: shape.clone(),
            });
        }
        Ok(CostReport {
            parameter_count: self.param_count(),
            macs_total: layers.iter().map(|l| l.macs).sum(),
            layers,
            asymmetric,
        })
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> Result<Network<U>> {
        let mut out = Network::<U>::build(&self.spec, 0)?;
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = U::from_f64_lossy(s.as_f64());
            }
        }
        for (dst, src) in out.buffers_mut().into_iter().zip(self.buffers()) {
            dst.copy_from_slice(src);
        }
        Ok(out)
    }
}

fn single_dim(shape: &[usize], net: &str, index: usize) -> Result<usize> {
    match *shape {
        [d] => Ok(d),
        _ => Err(Error::Config(format!(
            "{net}: layer {index} needs flattened features, got {shape:?}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub params: usize,
    pub macs: u64,
    pub output: Vec<usize>,
}

/// Parameter and compute totals of a network or block.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub parameter_count: usize,
    pub macs_total: u64,
    pub layers: Vec<LayerCost>,
    /// `(1×3 + 3×1 pair MACs, equivalent 3×3 MACs)` for every inception block.
    pub asymmetric: Vec<(u64, u64)>,
}

/// Totals for a single layer or block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BlockCostReport {
    pub parameter_count: usize,
    pub macs_total: u64,
}

pub fn block_cost<T: Scalar>(layer: &dyn Layer<T>, input: &[usize]) -> Result<BlockCostReport> {
    Ok(BlockCostReport {
        parameter_count: layer.params().iter().map(|p| p.len()).sum(),
        macs_total: layer.macs(input)?,
    })
}

/// A row of the reference parameter tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferenceRow {
    pub kind: &'static str,
    pub params: usize,
    /// Inception rows are not reproducible from the column widths alone and
    /// are reported, not enforced.
    pub exact: bool,
}

const fn row(kind: &'static str, params: usize, exact: bool) -> ReferenceRow {
    ReferenceRow { kind, params, exact }
}

pub const ZONE_REFERENCE: [ReferenceRow; 6] = [
    row("convolution", 896, true),
    row("inception", 33_744, false),
    row("inception", 79_168, false),
    row("linear", 196_736, true),
    row("residual", 196_736, true),
    row("linear", 514, true),
];

pub const PEDESTRIAN_REFERENCE: [ReferenceRow; 10] = [
    row("convolution", 896, true),
    row("inception", 24_080, false),
    row("inception", 91_584, false),
    row("inception", 111_040, false),
    row("inception", 226_320, false),
    row("inception", 226_320, false),
    row("linear", 1_638_912, true),
    row("linear", 131_328, true),
    row("residual", 819_456, true),
    row("linear", 514, true),
];

/// Accepted total for the pedestrian classifier (about 3.3 million).
pub const PEDESTRIAN_TOTAL_RANGE: (usize, usize) = (3_200_000, 3_350_000);

/// One line of the parameter comparison against the reference tables.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheckRow {
    pub layer: String,
    pub reference_kind: String,
    pub built: usize,
    pub reference: usize,
    pub exact_required: bool,
}

impl ParamCheckRow {
    pub fn matches(&self) -> bool {
        self.built == self.reference
    }

    /// Passes when the row matches or is a reported-only row.
    pub fn ok(&self) -> bool {
        !self.exact_required || self.matches()
    }
}

/// Compares a network's per-row parameter counts against a reference table.
pub fn param_check<T: Scalar>(net: &Network<T>, reference: &[ReferenceRow]) -> Result<Vec<ParamCheckRow>> {
    let rows = net.param_rows();
    if rows.len() != reference.len() {
        return Err(Error::Config(format!(
            "{} has {} parameterized rows, reference table has {}",
            net.spec().name,
            rows.len(),
            reference.len()
        )));
    }
    Ok(rows
        .into_iter()
        .zip(reference)
        .map(|((layer, built), r)| ParamCheckRow {
            layer,
            reference_kind: r.kind.to_string(),
            built,
            reference: r.params,
            exact_required: r.exact,
        })
        .collect())
}
