use alloc::format;
use alloc::vec;

use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean over output dimensions, then over the batch.
    Mse,
    /// Targets are class indices `[n]`.
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::SoftmaxCrossEntropy => "softmax_ce",
        }
    }
}

fn check(kind: LossKind, out: &Tensor, targets: &Tensor) -> Result<(usize, usize)> {
    if out.shape().len() != 2 {
        return Err(Error::dim("loss", format!("outputs must be [n, d], got {:?}", out.shape())));
    }
    let (n, d) = (out.shape()[0], out.shape()[1]);
    if n == 0 {
        return Err(Error::Argument("loss over an empty batch".into()));
    }
    match kind {
        LossKind::Mse => out.expect_same_shape(targets, "mse")?,
        LossKind::SoftmaxCrossEntropy => {
            if targets.shape() != [n] {
                return Err(Error::dim("cross_entropy", format!("targets {:?}, expected [{n}]", targets.shape())));
            }
            if let Some(t) = targets.data().iter().find(|&&t| t < 0.0 || t as usize >= d) {
                return Err(Error::Argument(format!("label {t} out of range for {d} classes")));
            }
        }
    }
    Ok((n, d))
}

/// Mean loss and its gradient with respect to `out`.
pub fn loss_and_grad(kind: LossKind, out: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    let (n, d) = check(kind, out, targets)?;
    let o = out.data();
    let mut grad = vec![0.0; o.len()];
    let mut total = 0.0;
    match kind {
        LossKind::Mse => {
            let denom = (n * d) as f64;
            for (i, (&y, &t)) in o.iter().zip(targets.data()).enumerate() {
                let e = y - t;
                total += e * e;
                grad[i] = 2.0 * e / denom;
            }
            total /= denom;
        }
        LossKind::SoftmaxCrossEntropy => {
            for b in 0..n {
                let row = &o[b * d..(b + 1) * d];
                let label = targets.data()[b] as usize;
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for &v in row {
                    z += libm::exp(v - m);
                }
                let log_z = m + libm::log(z);
                total += log_z - row[label];
                for (j, &v) in row.iter().enumerate() {
                    let p = libm::exp(v - log_z);
                    grad[b * d + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            total /= n as f64;
        }
    }
    Ok((total, Tensor::from_parts(out.shape().to_vec(), grad)))
}

pub fn loss(kind: LossKind, out: &Tensor, targets: &Tensor) -> Result<f64> {
    Ok(loss_and_grad(kind, out, targets)?.0)
}

/// Fraction of rows whose arg-max matches the label (first maximum wins ties).
pub fn accuracy(out: &Tensor, targets: &Tensor) -> Result<f64> {
    let (n, d) = check(LossKind::SoftmaxCrossEntropy, out, targets)?;
    let o = out.data();
    let mut correct = 0usize;
    for b in 0..n {
        let row = &o[b * d..(b + 1) * d];
        let mut best = 0;
        for j in 1..d {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == targets.data()[b] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff;

    #[test]
    fn mse_value() {
        let out = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = Tensor::new([2, 2], vec![1.0, 0.0, 3.0, 2.0]).unwrap();
        assert!((loss(LossKind::Mse, &out, &t).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let out = Tensor::zeros([3, 4]);
        let t = Tensor::from_slice(&[0.0, 1.0, 3.0]);
        let l = loss(LossKind::SoftmaxCrossEntropy, &out, &t).unwrap();
        assert!((l - libm::log(4.0)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let out = Tensor::new([2, 3], vec![0.3, -1.2, 2.0, 0.1, 0.4, -0.7]).unwrap();
        let labels = Tensor::from_slice(&[2.0, 0.0]);
        let reg = Tensor::new([2, 3], vec![0.0, 1.0, 0.5, -1.0, 0.2, 0.0]).unwrap();
        for (kind, t) in [(LossKind::SoftmaxCrossEntropy, &labels), (LossKind::Mse, &reg)] {
            let (_, g) = loss_and_grad(kind, &out, t).unwrap();
            let fd = finite_diff(|x| loss(kind, x, t).unwrap(), &out, 1e-6).unwrap();
            assert!(g.max_abs_diff(&fd).unwrap() < 1e-8);
        }
    }

    #[test]
    fn accuracy_counts_argmax() {
        let out = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy(&out, &Tensor::from_slice(&[0.0, 0.0])).unwrap(), 0.5);
        assert!(accuracy(&out, &Tensor::from_slice(&[0.0, 5.0])).is_err());
    }
}
