//! Scalar helpers shared across modules.

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln(exp(a) + exp(b))` without overflow. Returns the other argument
/// unchanged when one side is `-inf`, so degenerate mixing weights are exact.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Max-shifted `ln Σ exp(values)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + exp(u))`.
pub fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// `ln σ(u)` for the logistic function σ.
pub fn log_logistic(u: f64) -> f64 {
    -softplus(-u)
}

/// Sample mean and unbiased variance, summed in index order.
pub(crate) fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_exp_handles_neg_infinity_exactly() {
        assert_eq!(log_add_exp(-3.25, f64::NEG_INFINITY), -3.25);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, 1.5), 1.5);
        assert!((log_add_exp(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((log_add_exp(1000.0, 1000.0) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn logistic_round_trips_and_is_stable() {
        for &u in &[-40.0, -3.0, 0.0, 0.7, 25.0] {
            let p = logistic(u);
            assert!(p > 0.0 && p < 1.0 || u.abs() > 30.0);
            if u.abs() < 20.0 {
                assert!((logit(p) - u).abs() < 1e-9);
            }
            assert!((log_logistic(u) - p.ln()).abs() < 1e-12 * (1.0 + p.ln().abs()));
        }
        assert!(log_logistic(-800.0).is_finite());
    }

    #[test]
    fn log_sum_exp_matches_naive() {
        let v = [0.1, -2.0, 1.3];
        let naive: f64 = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - naive).abs() < 1e-14);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 2]), f64::NEG_INFINITY);
    }
}
