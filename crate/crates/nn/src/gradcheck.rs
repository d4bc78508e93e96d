//! Central finite differences for validating analytic gradients.

use crate::tensor::Tensor;

/// Central difference of `f` along coordinate `index` of input `which`.
pub fn central_difference(
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    inputs: &[Tensor<f64>],
    which: usize,
    index: usize,
    h: f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[index] += h;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[index] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Worst per-coordinate relative error. Each coordinate is normalized by
/// `max(|a|, |n|, 1e-3 * max_j |a_j|)` so components that are negligible at
/// the probe's scale do not dominate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Evenly spread probe indices, at most `count`, over `0..len`.
pub fn probe_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count + (i * 7919) % (len / count).max(1)).collect()
}
