//! Thin wrappers over the reference distributions.
//!
//! Tail probabilities and quantiles are computed in `f64` regardless of the
//! working scalar; probabilities do not benefit from generic precision.

use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal};

/// Standard normal quantile `Phi^{-1}(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    Normal::standard().inverse_cdf(p)
}

/// Standard normal upper tail `P(Z > x)`.
pub fn normal_sf(x: f64) -> f64 {
    Normal::standard().sf(x)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Upper tail of the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_sf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    FisherSnedecor::new(d1, d2)
        .expect("invalid F degrees of freedom")
        .sf(x)
}

/// Upper tail of the chi-squared distribution with `k` degrees of freedom.
pub fn chi2_sf(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(k).expect("invalid chi2 df").sf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn normal_quantile_reference_points() {
        assert_relative_eq!(normal_quantile(0.975), 1.959964, epsilon = 1e-5);
        assert_relative_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn f_tail_matches_chi2_limit() {
        // F(k, nu) -> chi2_k / k as nu -> infinity.
        let k = 3.0;
        let x = 2.2;
        let f = f_sf(x, k, 1e7);
        let c = chi2_sf(k * x, k);
        assert_relative_eq!(f, c, epsilon = 1e-4);
    }

    #[test]
    fn tails_are_probabilities() {
        for &x in &[0.1, 1.0, 5.0] {
            let p = f_sf(x, 2.0, 10.0);
            assert!(p > 0.0 && p < 1.0);
        }
        assert_eq!(f_sf(0.0, 2.0, 10.0), 1.0);
    }
}
