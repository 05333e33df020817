//! Central finite differences, used as the oracle for analytic gradients.

use alloc::format;

use crate::{Error, Result, Tensor};

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate of `x`.
pub fn finite_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        grad.data_mut()[i] = central_diff_at(&f, &mut probe, i, eps)?;
    }
    Ok(grad)
}

/// Central difference along a single flat coordinate. `probe` is restored on return.
pub fn central_diff_at(
    f: &impl Fn(&Tensor) -> f64,
    probe: &mut Tensor,
    index: usize,
    eps: f64,
) -> Result<f64> {
    let orig = probe.data()[index];
    probe.data_mut()[index] = orig + eps;
    let hi = f(probe);
    probe.data_mut()[index] = orig - eps;
    let lo = f(probe);
    probe.data_mut()[index] = orig;
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::Evaluation(format!(
            "objective not finite around coordinate {index}"
        )));
    }
    Ok((hi - lo) / (2.0 * eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff(|t| t.data()[0] * t.data()[0], &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::from_slice(&[1.0, -2.0, 0.5]);
        let g = finite_diff(|_| 4.2, &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_error_is_second_order() {
        // f = sum a_i x_i^3 has third derivative, so the central error is O(eps^2)
        let x = Tensor::from_slice(&[0.7, -1.3]);
        let f = |t: &Tensor| t.data().iter().map(|v| v * v * v).sum::<f64>();
        let exact = [3.0 * 0.49, 3.0 * 1.69];
        let e1 = finite_diff(f, &x, 1e-2).unwrap();
        let e2 = finite_diff(f, &x, 5e-3).unwrap();
        let err1 = (e1.data()[0] - exact[0]).abs();
        let err2 = (e2.data()[0] - exact[0]).abs();
        assert!(err2 < err1 / 3.0, "{err1} {err2}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = finite_diff(|t| 1.0 / t.data()[0], &Tensor::scalar(0.0), 1e-3);
        assert!(r.is_ok());
        let r = finite_diff(|_| f64::NAN, &Tensor::scalar(0.0), 1e-3);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
