//! Central finite differences, used as the independent reference for every
//! hand-written backward pass.

/// Step used for central differences.
pub const EPSILON: f64 = 1e-5;

/// Relative error floor: entries whose magnitude is below this are compared
/// on an absolute scale of the same size.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + ε) - f(x - ε)) / 2ε` for coordinate `index` of `values`.
///
/// `values` is restored before returning.
pub fn central_difference(values: &mut [f64], index: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = values[index];
    values[index] = orig + EPSILON;
    let plus = f(values);
    values[index] = orig - EPSILON;
    let minus = f(values);
    values[index] = orig;
    (plus - minus) / (2.0 * EPSILON)
}

/// Worst relative error between `analytic` and central differences of `f`
/// over the coordinates in `indices`.
pub fn max_relative_error(
    values: &mut [f64],
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    indices
        .into_iter()
        .map(|i| relative_error(analytic[i], central_difference(values, i, &mut f)))
        .fold(0.0, f64::max)
}
