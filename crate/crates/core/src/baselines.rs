//! Reference predictors for incremental popularity.

use crate::cascade::Cascade;

/// The constant `c` minimizing training MSLE: `log2(c + 1)` is the mean of
/// `log2(ΔP + 1)` over `labels`.
pub fn best_constant(labels: &[f64]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mean = labels.iter().map(|y| (y + 1.0).log2()).sum::<f64>() / labels.len() as f64;
    mean.exp2() - 1.0
}

/// Share of the observation window, at its end, used to estimate the rate.
pub const RATE_WINDOW: f64 = 0.25;

/// Extrapolates the repost rate over the last quarter of `[0, t_o]` across
/// the prediction window.
pub fn rate_extrapolation(c: &Cascade, t_o: f64, t_p: f64) -> f64 {
    let w = RATE_WINDOW * t_o;
    let recent = (c.popularity_at(t_o) - c.popularity_at(t_o - w)) as f64;
    recent / w * (t_p - t_o)
}
