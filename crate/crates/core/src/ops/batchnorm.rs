use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running per-channel statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }
}

/// Values saved by a train-mode pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T: Scalar> {
    x_hat: Tensor<T>,
    inv_std: Vec<f64>,
}

/// `(batch, channels, spatial)` view of a `[N, C]` or `[N, C, H, W]` tensor.
fn layout<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 && s.len() != 4 {
        return Err(Error::shape("batchnorm", "rank", "2 or 4", s.len()));
    }
    if s[1] != channels {
        return Err(Error::shape("batchnorm", "channels", channels, s[1]));
    }
    Ok((s[0], s[2..].iter().product()))
}

pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState,
    mode: BnMode,
) -> Result<Tensor<T>> {
    match mode {
        BnMode::Train => batchnorm_train(x, gamma, beta, state).map(|(y, _)| y),
        BnMode::Eval => batchnorm_eval(x, gamma, beta, state),
    }
}

/// Normalizes with batch statistics and folds them into the running averages.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = gamma.len();
    let (n, sp) = layout(x, c)?;
    if n < 2 {
        return Err(Error::Config("batchnorm in train mode needs a batch of at least 2".into()));
    }
    let count = (n * sp) as f64;
    let mut x_hat = x.clone();
    let mut y = x.clone();
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let idx = |b: usize| (b * c + ch) * sp;
        let mut sum = 0.0;
        for b in 0..n {
            sum += x.data()[idx(b)..idx(b) + sp].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for b in 0..n {
            sq += x.data()[idx(b)..idx(b) + sp]
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>();
        }
        let var = sq / count;
        let istd = 1.0 / (var + state.eps).sqrt();
        inv_std[ch] = istd;
        let (g, bt) = (gamma.data()[ch].as_f64(), beta.data()[ch].as_f64());
        for b in 0..n {
            for i in idx(b)..idx(b) + sp {
                let h = (x.data()[i].as_f64() - mean) * istd;
                x_hat.data_mut()[i] = T::from_f64_lossy(h);
                y.data_mut()[i] = T::from_f64_lossy(g * h + bt);
            }
        }
        let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
        let m = state.momentum;
        state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean;
        state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * unbiased;
    }
    y.ensure_finite("batchnorm")?;
    Ok((y, BnCache { x_hat, inv_std }))
}

pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState,
) -> Result<Tensor<T>> {
    let c = gamma.len();
    let (n, sp) = layout(x, c)?;
    let mut y = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let istd = 1.0 / (state.running_var[ch] + state.eps).sqrt();
            let (g, bt, mean) = (gamma.data()[ch].as_f64(), beta.data()[ch].as_f64(), state.running_mean[ch]);
            let start = (b * c + ch) * sp;
            for v in &mut y.data_mut()[start..start + sp] {
                *v = T::from_f64_lossy(g * (v.as_f64() - mean) * istd + bt);
            }
        }
    }
    y.ensure_finite("batchnorm")?;
    Ok(y)
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = gamma.len();
    let (n, sp) = layout(grad_out, c)?;
    let count = (n * sp) as f64;
    let mut dx = grad_out.clone();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let idx = |b: usize| (b * c + ch) * sp;
        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
        for b in 0..n {
            for i in idx(b)..idx(b) + sp {
                let dy = grad_out.data()[i].as_f64();
                sum_dy += dy;
                sum_dy_xh += dy * cache.x_hat.data()[i].as_f64();
            }
        }
        dgamma[ch] = T::from_f64_lossy(sum_dy_xh);
        dbeta[ch] = T::from_f64_lossy(sum_dy);
        let k = gamma.data()[ch].as_f64() * cache.inv_std[ch] / count;
        for b in 0..n {
            for i in idx(b)..idx(b) + sp {
                let dy = grad_out.data()[i].as_f64();
                let xh = cache.x_hat.data()[i].as_f64();
                dx.data_mut()[i] = T::from_f64_lossy(k * (count * dy - sum_dy - xh * sum_dy_xh));
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}
