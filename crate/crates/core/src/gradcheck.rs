//! Central finite differences, the reference every backward rule is checked
//! against.
//!
//! Non-differentiable points (ReLU at 0, ties inside a max-pool window) are
//! outside the tolerance claims; callers keep inputs away from them.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate `i`.
pub fn finite_diff_grad<T: Scalar>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, epsilon: f64) -> Tensor<T> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::c(orig.as_f64() + epsilon);
        let up = f(&probe).as_f64();
        probe.data_mut()[i] = T::c(orig.as_f64() - epsilon);
        let down = f(&probe).as_f64();
        probe.data_mut()[i] = orig;
        grad.push(T::c((up - down) / (2.0 * epsilon)));
    }
    Tensor::new(x.shape(), grad).expect("same shape as x")
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between two gradient tensors.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| relative_error(a.as_f64(), n.as_f64(), floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-4);
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0, 1e-6) < 1e-5);
    }
}
