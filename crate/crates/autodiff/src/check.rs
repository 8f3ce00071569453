//! Numerical gradient checking helpers used by the test suites.

use crate::Scalar;
use ndarray::ArrayD;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_diff<F, Func>(mut f: Func, x: &ArrayD<F>, eps: F) -> ArrayD<F>
where
    F: Scalar,
    Func: FnMut(&ArrayD<F>) -> F,
{
    let mut grad = ArrayD::<F>::zeros(x.raw_dim());
    let mut probe = x.clone();
    let two_eps = eps + eps;
    for idx in 0..x.len() {
        let orig = probe.as_slice().expect("standard layout")[idx];
        probe.as_slice_mut().expect("standard layout")[idx] = orig + eps;
        let hi = f(&probe);
        probe.as_slice_mut().expect("standard layout")[idx] = orig - eps;
        let lo = f(&probe);
        probe.as_slice_mut().expect("standard layout")[idx] = orig;
        grad.as_slice_mut().expect("standard layout")[idx] = (hi - lo) / two_eps;
    }
    grad
}

/// Worst relative error between two gradients. The denominator is floored so
/// near-zero entries compare absolutely.
pub fn max_rel_error<F: Scalar>(analytic: &ArrayD<F>, numeric: &ArrayD<F>, floor: F) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(floor);
        let rel = ((a - n).abs() / denom).widen();
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn central_diff_recovers_quadratic_gradient() {
        let x = arr1(&[1.0f64, -2.0, 0.5]).into_dyn();
        let g = central_diff(|p| p.iter().map(|v| v * v).sum::<f64>(), &x, 1e-5);
        let expect = arr1(&[2.0f64, -4.0, 1.0]).into_dyn();
        assert!(max_rel_error(&expect, &g, 1e-8) < 1e-8);
    }
}
