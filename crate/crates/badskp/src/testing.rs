//! Numerical test utilities: central-difference gradients and the error
//! norms used to compare them against analytic gradients. Lives in the
//! library (rather than a tests/ directory) so every crate's test suites
//! and the acceptance harness can share one implementation.

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
/// Step size scales with each coordinate's magnitude.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// ‖a − b‖₂ / max(‖b‖₂, floor): the relative error of `a` against the
/// reference `b`, safe when the reference is tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        diff += (x - y) * (x - y);
        norm += y * y;
    }
    diff.sqrt() / norm.sqrt().max(1e-10)
}
