//! Order-statistic quantiles used for edge and activation thresholds.
//!
//! For `n` values and probability `q` the threshold is the `k`-th smallest
//! value with `k = ⌈q·n⌉` (no interpolation between order statistics). With
//! distinct values exactly `n − k` of them lie strictly above it and `k − 1`
//! strictly below. When `k = 0` every value lies above the threshold, which
//! is reported as `-∞`.

use alloc::vec::Vec;

use crate::math;

/// Number of values at or below the `q`-quantile of `n` distinct values.
///
/// `q·n` values within `1e-9` of an integer are snapped to it so that, for
/// example, `0.7 · 10` counts as exactly 7.
pub fn quantile_rank(n: usize, q: f64) -> usize {
    let t = q * n as f64;
    let snapped = math::round(t);
    let k = if (t - snapped).abs() <= 1e-9 * t.abs().max(1.0) {
        snapped
    } else {
        math::ceil(t)
    };
    (k.max(0.0) as usize).min(n)
}

/// Threshold at probability `q`; `-∞` when `q·n` rounds up to zero.
///
/// Non-finite inputs are ordered with [`f64::total_cmp`].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let k = quantile_rank(values.len(), q);
    if k == 0 {
        return f64::NEG_INFINITY;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[k - 1]
}
