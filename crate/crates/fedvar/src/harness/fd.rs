//! Central-difference gradient oracle. Every analytic gradient in the crate
//! is tested against this, so it must stay independent of any analytic
//! derivative code.

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
///
/// Panics if an evaluation is non-finite; an oracle built on a diverging
/// function would silently compare garbage.
pub fn fd_gradient_oracle(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        assert!(
            up.is_finite() && down.is_finite(),
            "non-finite evaluation at coordinate {i}"
        );
        grad.push((up - down) / (2.0 * h));
    }
    grad
}
