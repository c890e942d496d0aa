use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed scale and saturation constants of the scaled exponential linear unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeluConstants {
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for SeluConstants {
    fn default() -> Self {
        SeluConstants {
            lambda: 1.050_700_987_355_480_5,
            alpha: 1.673_263_242_354_377_2,
        }
    }
}

impl SeluConstants {
    /// Both constants must exceed one.
    pub fn new(lambda: f64, alpha: f64) -> Option<Self> {
        (lambda > 1.0 && alpha > 1.0).then_some(SeluConstants { lambda, alpha })
    }
}

/// Elementwise nonlinearity applied after convolutions and hidden linear layers.
pub trait Activation<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn apply(&self, x: T) -> T;

    /// Derivative at pre-activation `x`.
    fn derivative(&self, x: T) -> T;

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        self.apply_in_place(y.data_mut());
        y
    }

    fn apply_in_place(&self, v: &mut [T]) {
        for x in v {
            *x = self.apply(*x);
        }
    }

    /// Multiplies the upstream gradient by the derivative at `input`.
    fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let mut g = grad_out.clone();
        for (g, &x) in g.data_mut().iter_mut().zip(input.data()) {
            *g = *g * self.derivative(x);
        }
        g
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Selu {
    pub constants: SeluConstants,
}

impl Selu {
    fn consts<T: Scalar>(&self) -> (T, T) {
        (
            T::from_f64_lossy(self.constants.lambda),
            T::from_f64_lossy(self.constants.alpha),
        )
    }
}

impl<T: Scalar> Activation<T> for Selu {
    fn name(&self) -> &'static str {
        "selu"
    }

    #[inline]
    fn apply(&self, x: T) -> T {
        let (lambda, alpha) = self.consts::<T>();
        let neg = lambda * alpha * (x.min(T::zero()).exp_fast() - T::one());
        if x > T::zero() {
            lambda * x
        } else {
            neg
        }
    }

    #[inline]
    fn derivative(&self, x: T) -> T {
        let (lambda, alpha) = self.consts::<T>();
        let neg = lambda * alpha * x.min(T::zero()).exp_fast();
        if x > T::zero() {
            lambda
        } else {
            neg
        }
    }

    fn apply_in_place(&self, v: &mut [T]) {
        selu_in_place(v, self.consts());
    }

    fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let (lambda, alpha) = self.consts::<T>();
        let la = lambda * alpha;
        let mut g = grad_out.clone();
        for (g, &x) in g.data_mut().iter_mut().zip(input.data()) {
            let neg = la * x.min(T::zero()).exp_fast();
            *g = *g * if x > T::zero() { lambda } else { neg };
        }
        g
    }
}

// Kept as a free function over a slice so the loop vectorizes regardless of
// how the trait methods get inlined.
fn selu_in_place<T: Scalar>(v: &mut [T], (lambda, alpha): (T, T)) {
    let la = lambda * alpha;
    for x in v {
        let neg = la * (x.min(T::zero()).exp_fast() - T::one());
        *x = if *x > T::zero() { lambda * *x } else { neg };
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Relu;

impl<T: Scalar> Activation<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn apply(&self, x: T) -> T {
        x.max(T::zero())
    }

    fn derivative(&self, x: T) -> T {
        if x > T::zero() {
            T::one()
        } else {
            T::zero()
        }
    }
}

pub fn selu<T: Scalar>(x: &Tensor<T>, c: SeluConstants) -> Tensor<T> {
    Selu { constants: c }.forward(x)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Activation::<T>::forward(&Relu, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(x: f64) -> f64 {
        Activation::<f64>::apply(&Selu::default(), x)
    }

    #[test]
    fn selu_reference_points() {
        let c = SeluConstants::default();
        assert_eq!(s(0.0), 0.0);
        assert_eq!(s(1.0), c.lambda);
        assert!((s(-30.0) + c.lambda * c.alpha).abs() < 1e-10);
        let h = 1e-8;
        assert!((s(h) - s(-h)).abs() < 1e-7);
    }

    #[test]
    fn constants_must_exceed_one() {
        assert!(SeluConstants::new(1.0, 2.0).is_none());
        assert!(SeluConstants::new(1.1, 0.5).is_none());
        assert!(SeluConstants::new(1.1, 1.5).is_some());
    }

    #[test]
    fn relu_points() {
        let t = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Activation::<f64>::derivative(&Relu, 0.0), 0.0);
    }

    #[test]
    fn normal_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = Tensor::<f64>::randn(&[200_000], 1.0, &mut rng);
        let r = relu(&y).mean();
        assert!(r > 0.35, "E[relu] = {r}");
        assert!((r - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 0.01);
        assert!(selu(&y, SeluConstants::default()).mean().abs() < 0.1);
        assert!(relu(&y).variance() < y.variance());
    }
}
