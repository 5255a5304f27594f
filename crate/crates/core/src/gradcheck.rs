//! Central finite differences, used to validate analytic gradients.

use crate::tensor::Tensor;

/// Central difference of a scalar function at coordinate `i` of `x`.
pub fn central_difference(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, i: usize, h: f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += h;
    let mut minus = x.clone();
    minus.data_mut()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error over the given coordinates.
pub fn max_relative_error(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    coords: &[usize],
    h: f64,
) -> f64 {
    coords
        .iter()
        .map(|&i| relative_error(analytic.data()[i], central_difference(f, x, i, h)))
        .fold(0.0, f64::max)
}
