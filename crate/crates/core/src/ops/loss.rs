use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dims2, Tensor};

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = dims2(logits, "softmax")?;
    let mut p = logits.clone();
    for row in p.data_mut().chunks_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    Ok(p)
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`), and its
/// gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (n, k) = dims2(logits, "softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape("softmax_cross_entropy", "labels", n, labels.len()));
    }
    if k < 2 {
        return Err(Error::shape("softmax_cross_entropy", "classes", ">= 2", k));
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (row, &label) in grad.data_mut().chunks_mut(k).zip(labels) {
        if label >= k {
            return Err(Error::Data(format!("label {label} out of range for {k} classes")));
        }
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
        for (j, v) in row.iter_mut().enumerate() {
            let p = (v.as_f64() - lse).exp();
            let t = if j == label { 1.0 } else { 0.0 };
            *v = T::from_f64_lossy((p - t) * inv_n);
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "softmax_cross_entropy" });
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_cost_ln2() {
        let l = Tensor::<f64>::from_vec(&[1, 2], vec![0.3, 0.3]).unwrap();
        let (loss, _) = softmax_cross_entropy(&l, &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction() {
        let l = Tensor::<f64>::from_vec(&[1, 2], vec![20.0, -20.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = vec![0.2, -1.3, 2.5, 0.7, -0.4, -0.9];
        let labels = [1, 0, 1];
        let l = Tensor::<f64>::from_vec(&[3, 2], data.clone()).unwrap();
        let (_, g) = softmax_cross_entropy(&l, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..data.len() {
            let mut p = data.clone();
            p[i] += eps;
            let mut m = data.clone();
            m[i] -= eps;
            let lp = softmax_cross_entropy(&Tensor::from_vec(&[3, 2], p).unwrap(), &labels).unwrap().0;
            let lm = softmax_cross_entropy(&Tensor::from_vec(&[3, 2], m).unwrap(), &labels).unwrap().0;
            let num = (lp - lm) / (2.0 * eps);
            let rel = (num - g.data()[i]).abs() / num.abs().max(g.data()[i].abs());
            assert!(rel < 1e-6, "coord {i}: {num} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Tensor::<f64>::from_vec(&[2, 2], vec![1000.0, -3.0, 0.1, 0.2]).unwrap();
        let p = softmax(&l).unwrap();
        for row in p.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
