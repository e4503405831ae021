//! Central finite-difference gradient checking.
//!
//! Verification support for the test suites: the oracle only evaluates a
//! scalar function numerically, so it stays independent of every analytic
//! backward pass it is used to check. Checks run in `f64` with a default
//! step of `h = 1e-5`.

/// Central-difference gradient of `f` at `x`: `(f(x+h) - f(x-h)) / 2h`
/// component by component.
pub fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Worst relative error between an analytic gradient and its
/// finite-difference estimate. Components where both magnitudes fall below
/// `floor` are compared absolutely against `floor` instead.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        let err = if scale > floor {
            (a - n).abs() / scale
        } else {
            (a - n).abs()
        };
        worst = worst.max(err);
    }
    worst
}

/// Default step size for the checks.
pub const FD_STEP: f64 = 1e-5;

/// Small-magnitude floor below which gradients are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;
