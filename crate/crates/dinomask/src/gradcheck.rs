//! Finite-difference gradient verification.
//!
//! The checker never touches the tape's backward pass: it only re-evaluates
//! a caller-supplied scalar function under coordinate perturbations, which
//! makes it an independent oracle for the analytic gradients.

/// Central-difference gradient of `f` at `x` with step `h`:
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)` per coordinate.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute floor: `|a - b| / max(|a|, |b|, floor)`.
/// The floor keeps near-zero gradients from blowing up the ratio.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst-case [`rel_error`] across two gradient vectors.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_recovered() {
        // f(x) = sum(x_i^2) has gradient 2x; central differences on a
        // quadratic are exact up to rounding.
        let x = [1.0, -2.0, 0.5];
        let g = central_diff(|v| v.iter().map(|t| t * t).sum(), &x, 1e-5);
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }

    #[test]
    fn rel_error_floor_applies() {
        assert_eq!(rel_error(0.0, 0.0, 1e-2), 0.0);
        // Tiny disagreement near zero is measured against the floor.
        assert!((rel_error(1e-9, -1e-9, 1e-2) - 2e-7).abs() < 1e-12);
        assert!((rel_error(2.0, 1.0, 1e-2) - 0.5).abs() < 1e-12);
    }
}
