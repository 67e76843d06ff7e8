//! Log-scale error metrics over incremental popularity.

/// Mean of `(log2(y + 1) - log2(ŷ + 1))^2` over `(truth, prediction)` pairs.
pub fn msle(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    let s: f64 = pairs.iter().map(|&(y, p)| ((y + 1.0).log2() - (p + 1.0).log2()).powi(2)).sum();
    s / pairs.len() as f64
}

/// Mean of `|log2(y + 2) - log2(ŷ + 2)| / log2(y + 2)`.
pub fn mape(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    let s: f64 = pairs
        .iter()
        .map(|&(y, p)| {
            let ly = (y + 2.0).log2();
            ((ly - (p + 2.0).log2()) / ly).abs()
        })
        .sum();
    s / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_cases() {
        assert_eq!(mape(&[(2.0, 6.0)]), 0.5);
        assert_eq!(msle(&[(1.0, 0.0)]), 1.0);
        assert_eq!(msle(&[(3.0, 3.0), (0.0, 0.0)]), 0.0);
        assert_eq!(mape(&[(3.0, 3.0), (0.0, 0.0)]), 0.0);
    }

    #[test]
    fn empty_is_nan() {
        assert!(msle(&[]).is_nan());
        assert!(mape(&[]).is_nan());
    }
}
