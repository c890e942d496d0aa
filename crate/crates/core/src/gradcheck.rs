//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classifiers::{Combine, DualHead};
use crate::error::{Error, Result};
use crate::inception::{build_inception, InceptionConfig};
use crate::nn::{ActivationLayer, BatchNorm2d, Conv2d, ConvUnit, Flatten, Layer, Linear, MaxPool2d, Sequential};
use crate::ops::activation::{Activation, Relu, Selu};
use crate::ops::conv::Conv2dGeometry;
use crate::ops::loss::softmax_cross_entropy;
use crate::ops::pool::Pool2dGeometry;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale, since
/// the difference quotient of an exactly zero gradient is pure roundoff.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Location of the worst entry, e.g. `param 2[17]` or `input[5]`.
    pub worst: String,
    pub checked: usize,
    /// Probes whose step straddled a non-differentiable point.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Two- and four-point estimates may differ by this much (relative) before
/// a probe is treated as crossing a kink.
const KINK_TOL: f64 = 1e-5;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Central differences from `f(t ± h)` and `f(t ± 2h)`: the fourth-order
/// estimate, or `None` when it disagrees with the second-order one.
fn stencil(f: [f64; 4], h: f64) -> Option<f64> {
    let [m2, m1, p1, p2] = f;
    let d2 = (p1 - m1) / (2.0 * h);
    let d4 = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    (rel_error(d2, d4) < KINK_TOL).then_some(d4)
}

/// Compares the analytic gradients of `L = Σ g ⊙ layer(x)` for a fixed
/// random `g` against fourth-order central differences with step `eps`.
/// At most `per_tensor` entries of the input and of each parameter are
/// probed; probes that straddle an activation kink or pooling switch are
/// skipped and counted.
pub fn grad_check(
    name: &str,
    layer: &mut dyn Layer<f64>,
    x: &Tensor<f64>,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.forward_train(x)?;
    let g = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let dx = layer.backward(&g)?;
    let analytic_params: Vec<Vec<f64>> = layer
        .params()
        .iter()
        .map(|p| p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let loss = |layer: &mut dyn Layer<f64>, x: &Tensor<f64>| -> Result<f64> {
        let y = layer.forward_train(x)?;
        Ok(y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
    };
    let mut report = GradCheckReport {
        name: name.into(),
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    let note = |report: &mut GradCheckReport, a: f64, f: [f64; 4], at: String| -> Result<()> {
        if !a.is_finite() || f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let Some(n) = stencil(f, eps) else {
            report.skipped += 1;
            return Ok(());
        };
        let e = rel_error(a, n);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e.max(report.max_rel_error);
            report.worst = at;
        }
        Ok(())
    };

    let mut xp = x.clone();
    for i in sample(&mut rng, x.len(), per_tensor.min(x.len())).into_iter() {
        let orig = xp.data()[i];
        let mut f = [0.0; 4];
        for (v, k) in f.iter_mut().zip([-2.0, -1.0, 1.0, 2.0]) {
            xp.data_mut()[i] = orig + k * eps;
            *v = loss(layer, &xp)?;
        }
        xp.data_mut()[i] = orig;
        note(&mut report, dx.data()[i], f, format!("input[{i}]"))?;
    }
    for (pi, analytic) in analytic_params.iter().enumerate() {
        let picks = sample(&mut rng, analytic.len(), per_tensor.min(analytic.len()));
        for i in picks.into_iter() {
            let orig = layer.params()[pi].data()[i];
            let mut f = [0.0; 4];
            for (v, k) in f.iter_mut().zip([-2.0, -1.0, 1.0, 2.0]) {
                layer.params_mut()[pi].data_mut()[i] = orig + k * eps;
                *v = loss(layer, x)?;
            }
            layer.params_mut()[pi].data_mut()[i] = orig;
            note(&mut report, analytic[i], f, format!("param {pi}[{i}]"))?;
        }
    }
    Ok(report)
}

/// Checks the softmax cross-entropy gradient with respect to the logits.
pub fn grad_check_loss(logits: &Tensor<f64>, labels: &[usize], eps: f64) -> Result<GradCheckReport> {
    let (_, grad) = softmax_cross_entropy(logits, labels)?;
    let mut report = GradCheckReport {
        name: "softmax_cross_entropy".into(),
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    let mut z = logits.clone();
    for i in 0..z.len() {
        let orig = z.data()[i];
        let mut f = [0.0; 4];
        for (v, k) in f.iter_mut().zip([-2.0, -1.0, 1.0, 2.0]) {
            z.data_mut()[i] = orig + k * eps;
            *v = softmax_cross_entropy(&z, labels)?.0;
        }
        z.data_mut()[i] = orig;
        let n = stencil(f, eps).ok_or(Error::NonFinite { op: "grad_check_loss" })?;
        let e = rel_error(grad.data()[i], n);
        report.checked += 1;
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = format!("logit[{i}]");
        }
    }
    Ok(report)
}

/// Standard normal draws pushed at least `margin` away from zero, so that
/// a ±eps step never crosses an activation kink.
pub fn off_kink_input(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::<f64>::randn(shape, 1.0, rng).map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}

fn selu() -> Result<Box<dyn Activation<f64>>> {
    Ok(Box::new(Selu::default()))
}

/// One check per layer type plus a zone-sized inception block at 8×8.
pub fn standard_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut lin = Linear::<f64>::new(12, 5, &mut rng);
    let x = Tensor::randn(&[3, 12], 1.0, &mut rng);
    out.push(grad_check("linear", &mut lin, &x, eps, 200, seed)?);

    let x = Tensor::randn(&[2, 3, 7, 7], 1.0, &mut rng);
    for (name, geom) in [
        ("conv2d 3x3/2", Conv2dGeometry::new(3, 3, 2, 1)),
        ("conv2d 3x3 same", Conv2dGeometry::same(3, 3)),
        ("conv2d 1x3 same", Conv2dGeometry::same(1, 3)),
        ("conv2d 3x1 same", Conv2dGeometry::same(3, 1)),
        ("conv2d 5x5 same", Conv2dGeometry::same(5, 5)),
    ] {
        let mut conv = Conv2d::<f64>::new(3, 4, geom, &mut rng);
        out.push(grad_check(name, &mut conv, &x, eps, 200, seed)?);
    }

    // Distinct, well separated values keep every pooling window tie-free.
    let n = 2 * 3 * 8 * 8;
    let mut perm: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
    let xp = Tensor::from_vec(&[2, 3, 8, 8], perm)?;
    for (name, geom) in [
        ("maxpool 4x4/2", Pool2dGeometry::new(4, 4, 2, 1)),
        ("maxpool 4x4 same", Pool2dGeometry::same(4, 4)),
    ] {
        let mut pool = MaxPool2d::new(geom);
        out.push(grad_check(name, &mut pool, &xp, eps, 300, seed)?);
    }

    let xk = off_kink_input(&[2, 3, 5, 5], 1e-2, &mut rng);
    let mut act = ActivationLayer::<f64>::new(Box::new(Selu::default()));
    out.push(grad_check("selu", &mut act, &xk, eps, 150, seed)?);
    let mut act = ActivationLayer::<f64>::new(Box::new(Relu));
    out.push(grad_check("relu", &mut act, &xk, eps, 150, seed)?);

    let mut bn = BatchNorm2d::<f64>::new(3);
    let xb = Tensor::randn(&[4, 3, 5, 5], 2.0, &mut rng);
    out.push(grad_check("batchnorm", &mut bn, &xb, eps, 300, seed)?);

    let mut flat = Flatten::default();
    out.push(grad_check("flatten", &mut flat, &xb, eps, 50, seed)?);

    let mut unit = ConvUnit::new(Conv2d::<f64>::new(3, 4, Conv2dGeometry::same(3, 3), &mut rng), true, selu().ok());
    out.push(grad_check("conv+bn+selu", &mut unit, &xb, eps, 200, seed)?);

    let mut head = Sequential::<f64>::new();
    head.push(Box::new(Flatten::default()));
    head.push(Box::new(DualHead::new(48, &[16], 16, Combine::Concat, &selu, &mut rng)?));
    head.push(Box::new(Linear::new(32, 2, &mut rng)));
    let xh = Tensor::randn(&[3, 3, 4, 4], 1.0, &mut rng);
    out.push(grad_check("head concat", &mut head, &xh, eps, 150, seed)?);
    let mut head = DualHead::<f64>::new(48, &[24, 16], 16, Combine::Add, &selu, &mut rng)?;
    let xh = Tensor::randn(&[3, 48], 1.0, &mut rng);
    out.push(grad_check("head add", &mut head, &xh, eps, 150, seed)?);

    let cfg = InceptionConfig::from_columns(32, [16, 8, 16, 16, 8, 16, 32, 32, 64], 64);
    let mut block = build_inception::<f64, _>(cfg, &selu, false, &mut rng)?;
    let xi = Tensor::randn(&[2, 32, 8, 8], 1.0, &mut rng);
    out.push(grad_check("inception zone row 1 at 8x8", &mut block, &xi, eps, 60, seed)?);

    let logits = Tensor::randn(&[4, 2], 2.0, &mut rng);
    out.push(grad_check_loss(&logits, &[0, 1, 1, 0], eps)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in standard_suite(42).unwrap() {
            assert!(r.passes(1e-4), "{r:?}");
            assert!(r.checked > 0 && r.skipped * 10 <= r.checked, "{r:?}");
        }
    }

    #[test]
    fn linear_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::<f64>::new(6, 3, &mut rng);
        let x = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let r = grad_check("linear", &mut lin, &x, 1e-5, 100, 1).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn broken_gradient_is_reported() {
        struct Wrong(Linear<f64>);
        impl Layer<f64> for Wrong {
            fn describe(&self) -> String {
                "wrong".into()
            }
            fn output_shape(&self, i: &[usize]) -> Result<Vec<usize>> {
                self.0.output_shape(i)
            }
            fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
                self.0.forward(x)
            }
            fn forward_train(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
                self.0.forward_train(x)
            }
            fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
                Ok(self.0.backward(g)?.map(|v| v * 1.01))
            }
            fn macs(&self, i: &[usize]) -> Result<u64> {
                self.0.macs(i)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = Wrong(Linear::new(4, 2, &mut rng));
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let r = grad_check("wrong", &mut w, &x, 1e-5, 50, 1).unwrap();
        assert!(!r.passes(1e-4));
        assert!(r.worst.starts_with("input"));
    }
}
