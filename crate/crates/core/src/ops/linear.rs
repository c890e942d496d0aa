use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::{dims2, Tensor};

/// `x·W + b` for `x: [N, D]`, `W: [D, K]`, `b: [K]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = dims2(x, "linear")?;
    let (wd, k) = dims2(weight, "linear")?;
    if wd != d {
        return Err(Error::shape("linear", "input features", wd, d));
    }
    if bias.shape() != [k] {
        return Err(Error::shape("linear", "bias", format!("[{k}]"), format!("{:?}", bias.shape())));
    }
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(Trans::No, Trans::No, n, k, d, x.data(), weight.data(), T::one(), &mut out);
    let y = Tensor::from_vec(&[n, k], out)?;
    y.ensure_finite("linear")?;
    Ok(y)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, d) = dims2(x, "linear_backward")?;
    let (_, k) = dims2(weight, "linear_backward")?;
    if grad_out.shape() != [n, k] {
        return Err(Error::shape(
            "linear_backward",
            "grad_out",
            format!("[{n}, {k}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut dx = vec![T::zero(); n * d];
    gemm(Trans::No, Trans::Yes, n, d, k, grad_out.data(), weight.data(), T::zero(), &mut dx);
    let mut dw = vec![T::zero(); d * k];
    gemm(Trans::Yes, Trans::No, d, k, n, x.data(), grad_out.data(), T::zero(), &mut dw);
    let mut db = vec![T::zero(); k];
    for row in grad_out.data().chunks(k) {
        db.iter_mut().zip(row).for_each(|(a, v)| *a = *a + *v);
    }
    Ok((Tensor::from_vec(&[n, d], dx)?, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_input_through() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let mut eye = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = linear(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let w = Tensor::<f64>::zeros(&[4, 2]);
        let err = linear(&x, &w, &Tensor::zeros(&[2])).unwrap_err();
        assert!(err.to_string().contains("input features"));
    }
}
