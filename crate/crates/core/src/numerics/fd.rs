//! Central finite differences for gradient verification.
//!
//! Independent of the tape: callers provide a plain closure from a flat
//! parameter vector to a scalar, and this module perturbs each coordinate.

/// Central-difference gradient of `f` at `point` with step `h`.
pub fn central_diff<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let plus = f(&probe);
        probe[i] = point[i] - h;
        let minus = f(&probe);
        probe[i] = point[i];
        grads.push((plus - minus) / (2.0 * h));
    }
    grads
}

/// Error between an analytic and a numeric gradient entry, relative to the
/// larger magnitude but never to less than 1e-3 (tiny gradients are compared
/// on an absolute scale where finite differences bottom out).
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-3, f64::max(analytic.abs(), numeric.abs()))
}

/// Largest per-coordinate [`grad_error`] between two gradient vectors.
pub fn max_grad_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| grad_error(a, n))
        .fold(0.0, f64::max)
}
