//! Mini-batch SGD for the classifiers, hard-negative mining and the
//! activation comparison experiment.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::weights::encode;
use crate::classifiers::{BuildOptions, Network, NetworkSpec};
use crate::data::bbox::{max_iou, BoundingBox};
use crate::data::frame::{AnnotatedFrame, FrameSource};
use crate::data::image::{crops_to_tensor, flip_horizontal, CROP_SIZE};
use crate::data::samples::{Label, LabeledCrop, Provenance};
use crate::detect::{detect, CropScorer, PipelineConfig};
use crate::error::{Error, Result};
use crate::ops::loss::softmax_cross_entropy;
use crate::registry::ArchitectureRegistry;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    /// Epochs without an improvement of at least `tolerance` in mean loss
    /// before training stops.
    pub patience: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub activation: String,
    pub batchnorm: bool,
    /// Random horizontal flips of training crops.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            max_epochs: 20,
            patience: 5,
            tolerance: 1e-4,
            seed: 42,
            activation: "selu".into(),
            batchnorm: false,
            flip: true,
        }
    }
}

/// Learning rate for the pedestrian classifier; the deeper SELU stack
/// diverges at the default 0.01.
pub const PEDESTRIAN_LEARNING_RATE: f64 = 0.002;

impl TrainConfig {
    /// Defaults with [`PEDESTRIAN_LEARNING_RATE`].
    pub fn pedestrian() -> Self {
        TrainConfig {
            learning_rate: PEDESTRIAN_LEARNING_RATE,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch size {} must be at least 2", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.max_epochs == 0 {
            return bad("at least one epoch is required".into());
        }
        Ok(())
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            activation: self.activation.clone(),
            batchnorm: self.batchnorm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub steps: Vec<StepLoss>,
    pub epochs: Vec<EpochSummary>,
}

impl LossCurve {
    /// `step,loss,epoch,val_accuracy`; validation accuracy appears on the
    /// last step of each epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,epoch,val_accuracy\n");
        for (i, st) in self.steps.iter().enumerate() {
            let last_of_epoch = self.steps.get(i + 1).is_none_or(|n| n.epoch != st.epoch);
            let val = self
                .epochs
                .iter()
                .find(|e| e.epoch == st.epoch)
                .and_then(|e| e.val_accuracy)
                .filter(|_| last_of_epoch)
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            let _ = writeln!(s, "{},{:.8},{},{}", st.step, st.loss, st.epoch, val);
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Stochastic gradient descent with classical momentum:
/// `v ← μ·v + g`, `θ ← θ − η·v`.
pub struct Sgd<T: Scalar> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network<T>) {
        let mut params = net.params_mut();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let (lr, mu) = (T::from_f64_lossy(self.learning_rate), T::from_f64_lossy(self.momentum));
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let (val, grad) = p.value_and_grad_mut();
            for ((w, g), m) in val.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
                *m = mu * *m + *g;
                *w = *w - lr * *m;
            }
        }
    }
}

/// Stacks crops into a network input, flipping those marked in `flips`.
pub fn batch_tensor<T: Scalar>(crops: &[&LabeledCrop], flips: &[bool]) -> Result<Tensor<T>> {
    let pixels: Vec<std::borrow::Cow<'_, [u8]>> = crops
        .par_iter()
        .zip(flips)
        .map(|(c, &f)| {
            if f {
                std::borrow::Cow::Owned(flip_horizontal(&c.pixels, CROP_SIZE))
            } else {
                std::borrow::Cow::Borrowed(c.pixels.as_slice())
            }
        })
        .collect();
    let refs: Vec<&[u8]> = pixels.iter().map(|p| p.as_ref()).collect();
    crops_to_tensor(&refs, CROP_SIZE)
}

/// Forward, backward and one optimizer update; returns the batch loss.
pub fn train_step<T: Scalar>(net: &mut Network<T>, opt: &mut Sgd<T>, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    net.zero_grad();
    let logits = net.forward_train(x)?;
    let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
    net.backward(&grad)?;
    opt.step(net);
    Ok(loss)
}

/// Mean softmax cross-entropy of `crops` without updating anything.
pub fn evaluate_loss(net: &Network<f32>, crops: &[LabeledCrop]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in crops.chunks(64) {
        let refs: Vec<&LabeledCrop> = chunk.iter().collect();
        let x = batch_tensor::<f32>(&refs, &vec![false; refs.len()])?;
        let labels: Vec<usize> = chunk.iter().map(|c| c.label.class()).collect();
        total += softmax_cross_entropy(&net.forward(&x)?, &labels)?.0 * chunk.len() as f64;
    }
    Ok(total / crops.len().max(1) as f64)
}

/// Fraction of crops whose more probable class matches the label.
pub fn accuracy(net: &Network<f32>, crops: &[LabeledCrop]) -> Result<f64> {
    if crops.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in crops.chunks(64) {
        let refs: Vec<&LabeledCrop> = chunk.iter().collect();
        let x = batch_tensor::<f32>(&refs, &vec![false; refs.len()])?;
        let logits = net.forward(&x)?;
        for (l, c) in logits.data().chunks(2).zip(chunk) {
            let predicted = if l[1] > l[0] { Label::Positive } else { Label::Negative };
            correct += (predicted == c.label) as usize;
        }
    }
    Ok(correct as f64 / crops.len() as f64)
}

/// Trains `net` in place. The shuffle order and flips of epoch `e` come
/// from the stream `(seed, e)`, so identical inputs give identical weights.
pub fn train(
    net: &mut Network<f32>,
    crops: &[LabeledCrop],
    validation: Option<&[LabeledCrop]>,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    cfg.validate()?;
    let positives = crops.iter().filter(|c| c.is_positive()).count();
    if positives == 0 || positives == crops.len() {
        return Err(Error::Data(format!(
            "training needs both classes; got {positives} positive of {}",
            crops.len()
        )));
    }
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut curve = LossCurve::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut step = 0;
    let mut order: Vec<usize> = (0..crops.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order.iter().map(|_| cfg.flip && rng.gen_bool(0.5)).collect();
        let mut sum = 0.0;
        let mut batches = 0;
        // A trailing batch of one sample would break batch statistics.
        let usable = if crops.len() % cfg.batch_size == 1 { crops.len() - 1 } else { crops.len() };
        for start in (0..usable).step_by(cfg.batch_size) {
            let end = (start + cfg.batch_size).min(usable);
            let batch: Vec<&LabeledCrop> = order[start..end].iter().map(|&i| &crops[i]).collect();
            let x = batch_tensor::<f32>(&batch, &flips[start..end])?;
            let labels: Vec<usize> = batch.iter().map(|c| c.label.class()).collect();
            let loss = match train_step(net, &mut opt, &x, &labels) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(Error::Divergence { step, loss: l }),
                Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            curve.steps.push(StepLoss { step, epoch, loss });
            sum += loss;
            batches += 1;
            step += 1;
        }
        let mean_loss = sum / batches.max(1) as f64;
        let val_accuracy = validation.map(|v| accuracy(net, v)).transpose()?;
        log::info!(
            "{} epoch {epoch}: loss {mean_loss:.5}{}",
            net.spec().name,
            val_accuracy.map(|a| format!(", validation accuracy {a:.4}")).unwrap_or_default()
        );
        curve.epochs.push(EpochSummary {
            epoch,
            mean_loss,
            val_accuracy,
        });
        if mean_loss < best - cfg.tolerance {
            best = mean_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(curve)
}

/// Builds the named architecture with `cfg`'s activation and batch-norm
/// choice, initialized from `cfg.seed`, and trains it on `crops`.
pub fn fit(arch: &str, crops: &[LabeledCrop], validation: Option<&[LabeledCrop]>, cfg: &TrainConfig) -> Result<(Network<f32>, LossCurve)> {
    let spec = ArchitectureRegistry::builtin().spec(arch, &cfg.build_options())?;
    let mut net = Network::build(&spec, cfg.seed)?;
    let curve = train(&mut net, crops, validation, cfg)?;
    Ok((net, curve))
}

/// Git-style blob hash (`sha1("blob <len>\0" ++ bytes)`) in hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = sha1_smol::Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.digest().to_string()
}

/// Hash of the serialized parameters and buffers.
pub fn parameter_hash<T: Scalar>(net: &Network<T>) -> String {
    content_hash(&encode(net))
}

/// Detections whose best IoU against ground truth is below 0.5, highest
/// score first, at most `cap`, cropped as negatives.
pub fn mined_from_detections(frame: &AnnotatedFrame, detections: &[BoundingBox], cap: usize) -> Result<Vec<LabeledCrop>> {
    let mut misses: Vec<&BoundingBox> = detections.iter().filter(|d| max_iou(d, &frame.boxes) < 0.5).collect();
    misses.sort_by(|a, b| {
        b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)).then(a.x.cmp(&b.x)).then(a.y.cmp(&b.y))
    });
    misses
        .into_iter()
        .take(cap)
        .map(|d| {
            let rect = d.clamp_to(frame.image.width(), frame.image.height()).unwrap_or(*d);
            Ok(LabeledCrop {
                pixels: frame.image.crop_resize(&rect, CROP_SIZE)?,
                label: Label::Negative,
                provenance: Provenance {
                    frame: frame.id.clone(),
                    rect: BoundingBox { score: None, ..rect },
                },
            })
        })
        .collect()
}

/// Runs the detector over `source` and collects its false positives as
/// new negatives, at most `per_frame` per frame.
pub fn mine_hard_negatives(
    source: &dyn FrameSource,
    cz: &dyn CropScorer,
    cp: &dyn CropScorer,
    cfg: &PipelineConfig,
    per_frame: usize,
) -> Result<Vec<LabeledCrop>> {
    let mut out = Vec::new();
    for i in 0..source.len() {
        let frame = source.frame(i)?;
        let found = detect(&frame.image, cz, cp, cfg)?;
        let boxes: Vec<BoundingBox> = found.detections.iter().map(|d| d.bbox).collect();
        out.extend(mined_from_detections(&frame, &boxes, per_frame)?);
    }
    Ok(out)
}

/// Mean and variance of one activation output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationStat {
    pub index: usize,
    pub activation: String,
    pub mean: f64,
    pub variance: f64,
}

/// Statistics of every activation output for `probe`, in execution order.
pub fn activation_stats(net: &Network<f32>, probe: &Tensor<f32>) -> Result<Vec<ActivationStat>> {
    let mut stats = Vec::new();
    let mut obs = |name: &str, t: &Tensor<f32>| {
        stats.push(ActivationStat {
            index: stats.len(),
            activation: name.to_string(),
            mean: t.mean(),
            variance: t.variance(),
        });
    };
    net.forward_observed(probe, &mut obs)?;
    Ok(stats)
}

/// Standard normal probe batch of network-input shape.
pub fn normal_probe(spec: &NetworkSpec, batch: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = spec.input;
    Tensor::randn(&[batch, c, h, w], 1.0, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationComparison {
    pub selu: LossCurve,
    pub relu: LossCurve,
}

impl ActivationComparison {
    /// `step,epoch,selu_loss,relu_loss` over the shared step grid.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,selu_loss,relu_loss\n");
        for (a, b) in self.selu.steps.iter().zip(&self.relu.steps) {
            let _ = writeln!(s, "{},{},{:.8},{:.8}", a.step, a.epoch, a.loss, b.loss);
        }
        s
    }
}

/// Trains architecture `arch` twice with identical seed, data and
/// schedule, once per activation. Early stopping is disabled so both
/// curves share one step grid.
pub fn compare_activations(arch: &str, crops: &[LabeledCrop], base: &TrainConfig) -> Result<ActivationComparison> {
    let registry = ArchitectureRegistry::builtin();
    let run = |activation: &str| -> Result<LossCurve> {
        let cfg = TrainConfig {
            activation: activation.into(),
            patience: usize::MAX,
            ..base.clone()
        };
        let spec = registry.spec(arch, &cfg.build_options())?;
        let mut net = Network::build(&spec, cfg.seed)?;
        train(&mut net, crops, None, &cfg)
    };
    Ok(ActivationComparison {
        selu: run("selu")?,
        relu: run("relu")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::zone_classifier_spec;
    use crate::data::image::RgbImage;

    fn solid(v: u8, label: Label) -> LabeledCrop {
        LabeledCrop {
            pixels: vec![v; CROP_SIZE * CROP_SIZE * 3],
            label,
            provenance: Provenance {
                frame: "toy".into(),
                rect: BoundingBox::new(0, 0, 64, 64),
            },
        }
    }

    fn toy() -> Vec<LabeledCrop> {
        (0..20)
            .map(|i| if i % 2 == 0 { solid(255, Label::Positive) } else { solid(0, Label::Negative) })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 10,
            max_epochs: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let mut net = Network::build(&zone_classifier_spec(&BuildOptions::default()), 1).unwrap();
        let crops = toy();
        let curve = train(&mut net, &crops, Some(&crops), &small_cfg()).unwrap();
        assert_eq!(accuracy(&net, &crops).unwrap(), 1.0);
        assert!(curve.epochs.len() <= 5);
        assert!(curve.to_csv().starts_with("step,loss,epoch,val_accuracy\n0,"));
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = zone_classifier_spec(&BuildOptions::default());
        let crops = toy();
        let cfg = TrainConfig {
            max_epochs: 2,
            ..small_cfg()
        };
        let mut a = Network::build(&spec, 3).unwrap();
        let mut b = Network::build(&spec, 3).unwrap();
        train(&mut a, &crops, None, &cfg).unwrap();
        train(&mut b, &crops, None, &cfg).unwrap();
        assert_eq!(parameter_hash(&a), parameter_hash(&b));
    }

    #[test]
    fn single_class_rejected() {
        let mut net = Network::build(&zone_classifier_spec(&BuildOptions::default()), 1).unwrap();
        let crops = vec![solid(0, Label::Negative); 4];
        assert!(matches!(train(&mut net, &crops, None, &small_cfg()), Err(Error::Data(_))));
        let cfg = TrainConfig {
            batch_size: 1,
            ..small_cfg()
        };
        assert!(matches!(train(&mut net, &toy(), None, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn huge_learning_rate_diverges_with_step() {
        let mut net = Network::build(&zone_classifier_spec(&BuildOptions::default()), 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e12,
            ..small_cfg()
        };
        match train(&mut net, &toy(), None, &cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step < 10),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn small_step_lowers_sample_loss() {
        let spec = zone_classifier_spec(&BuildOptions::default());
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Network::<f64>::build(&spec, seed).unwrap();
            let x = Tensor::<f64>::randn(&[1, 3, 64, 64], 1.0, &mut rng);
            let label = [(seed % 2) as usize];
            let before = softmax_cross_entropy(&net.forward(&x).unwrap(), &label).unwrap().0;
            let mut opt = Sgd::new(1e-4, 0.0);
            train_step(&mut net, &mut opt, &x, &label).unwrap();
            let after = softmax_cross_entropy(&net.forward(&x).unwrap(), &label).unwrap().0;
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn mining_keeps_only_misses() {
        let frame = AnnotatedFrame {
            id: "f".into(),
            image: RgbImage::new(100, 100).unwrap(),
            boxes: vec![BoundingBox::new(10, 10, 16, 20)],
        };
        let perfect = [BoundingBox::new(10, 10, 16, 20).with_score(0.9)];
        assert!(mined_from_detections(&frame, &perfect, 5).unwrap().is_empty());
        let spurious = [perfect[0], BoundingBox::new(70, 70, 16, 16).with_score(0.8)];
        let mined = mined_from_detections(&frame, &spurious, 5).unwrap();
        assert_eq!(mined.len(), 1);
        assert!(max_iou(&mined[0].provenance.rect, &frame.boxes) < 0.5);
        assert_eq!(mined[0].label, Label::Negative);
    }

    #[test]
    fn relu_zero_input_has_zero_stats() {
        let spec = zone_classifier_spec(&BuildOptions {
            activation: "relu".into(),
            batchnorm: false,
        });
        let mut net = Network::build(&spec, 0).unwrap();
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let stats = activation_stats(&net, &Tensor::zeros(&[2, 3, 64, 64])).unwrap();
        assert!(!stats.is_empty());
        assert!(stats.iter().all(|s| s.mean == 0.0 && s.variance == 0.0));
    }

    #[test]
    fn fresh_relu_means_are_positive() {
        let spec = zone_classifier_spec(&BuildOptions {
            activation: "relu".into(),
            batchnorm: false,
        });
        let net = Network::build(&spec, 7).unwrap();
        let stats = activation_stats(&net, &normal_probe(&spec, 8, 1)).unwrap();
        assert!(stats.iter().all(|s| s.mean > 0.0), "{stats:?}");
    }

    #[test]
    fn selu_stack_self_normalizes() {
        use crate::nn::{Conv2d, ConvUnit, Layer, Sequential};
        use crate::ops::activation::Selu;
        use crate::ops::conv::Conv2dGeometry;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut stack = Sequential::<f32>::new();
        for _ in 0..8 {
            let conv = Conv2d::new(16, 16, Conv2dGeometry::same(3, 3), &mut rng);
            stack.push(Box::new(ConvUnit::new(conv, false, Some(Box::new(Selu::default())))));
        }
        let x = Tensor::<f32>::randn(&[4, 16, 16, 16], 1.0, &mut rng);
        let mut means = Vec::new();
        stack.forward_observed(&x, &mut |_, t: &Tensor<f32>| means.push(t.mean())).unwrap();
        assert_eq!(means.len(), 8);
        assert!(means.iter().all(|m| m.abs() < 0.3), "{means:?}");
    }
}
