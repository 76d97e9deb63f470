//! Finite-difference gradient oracle.
//!
//! Deliberately uses only forward evaluations so it stays independent of the
//! backward rules it is used to check.

/// Denominator floor for [`relative_error`].
pub const RELATIVE_FLOOR: f64 = 1e-7;

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every `i`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Largest elementwise [`relative_error`]; `INFINITY` on length mismatch.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}
