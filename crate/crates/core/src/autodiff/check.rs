//! Finite-difference helpers for gradient verification.
//!
//! These only ever evaluate a function; they share no code with the
//! backward pass they are used to check.

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    index: usize,
    step: f64,
) -> f64 {
    let mut probe = x.to_vec();
    probe[index] = x[index] + step;
    let plus = f(&probe);
    probe[index] = x[index] - step;
    let minus = f(&probe);
    (plus - minus) / (2.0 * step)
}

/// Relative disagreement `|a - b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps the ratio meaningful when both values are essentially zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
