//! Scalar numeric helpers used throughout the crate.

/// Logistic sigmoid, stable on both tails.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// (softplus(x), sigmoid(x)) from a single exponential; the sampler hot
/// loop needs both at every evaluation point.
#[inline]
pub fn softplus_sigmoid(x: f64) -> (f64, f64) {
    if x > 0.0 {
        let q = (-x).exp();
        (x + q.ln_1p(), 1.0 / (1.0 + q))
    } else {
        let q = x.exp();
        (q.ln_1p(), q / (1.0 + q))
    }
}

/// Numerically stable log(sum(exp(xs))).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// log(1 - exp(w)) for w < 0.
#[inline]
pub fn log1mexp(w: f64) -> f64 {
    debug_assert!(w <= 0.0);
    // Mächler's split keeps precision on both branches.
    if w > -std::f64::consts::LN_2 {
        (-w.exp_m1()).ln()
    } else {
        (-w.exp()).ln_1p()
    }
}

/// Linear-interpolation quantile (R type 7). `q` in [0, 1]; data need not be sorted.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Error function via the Abramowitz-Stegun 7.1.26 rational fit
/// (absolute error below 1.5e-7; plenty for test statistics).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sigmoid_tails() {
        assert_abs_diff_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0);
        assert!(sigmoid(-700.0) > 0.0 && sigmoid(-700.0) < 1e-300);
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for &x in &[-20.0, -1.0, 0.0, 0.5, 3.0, 20.0] {
            assert_abs_diff_eq!(softplus(x), (1.0 + x.exp()).ln(), epsilon = 1e-12);
        }
        assert_abs_diff_eq!(softplus(1000.0), 1000.0);
    }

    #[test]
    fn logsumexp_shift_invariant() {
        let xs = [1.0, 2.0, 3.0];
        let shifted: Vec<f64> = xs.iter().map(|x| x + 700.0).collect();
        assert_abs_diff_eq!(logsumexp(&shifted) - 700.0, logsumexp(&xs), epsilon = 1e-10);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_abs_diff_eq!(quantile(&v, 0.0), 1.0);
        assert_abs_diff_eq!(quantile(&v, 1.0), 4.0);
        assert_abs_diff_eq!(median(&v), 2.5);
        assert_abs_diff_eq!(quantile(&v, 0.25), 1.75);
    }

    #[test]
    fn erf_reference_points() {
        assert_abs_diff_eq!(erf(0.0), 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(erf(1.0), 0.8427007929497149, epsilon = 2e-7);
        assert_abs_diff_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 2e-7);
    }
}
