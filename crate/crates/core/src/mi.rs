//! Multiple-imputation orchestration and combining.
//!
//! Estimation runs separately on each plausible value and the results are
//! pooled: scalar estimates by the usual combining rules (mean, within
//! variance `W`, between variance `B`, total `W + (1 + 1/m) B`), and joint
//! hypotheses across outcomes by the pooled multivariate Wald statistic
//! `D1` referenced against an F distribution.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::{build_design, CoefInfo, StackedDesign};
use crate::dist;
use crate::error::{Error, Result};
use crate::fit::{cov_param_names, fit_ml, FitOptions, FitResult};
use crate::model::ModelSpec;
use crate::scalar::{as_f64, real, Real};

#[derive(Debug, Clone, Copy)]
pub struct MiOptions {
    pub fit: FitOptions,
    /// Pool with the cluster-robust coefficient covariance (the default);
    /// model-based otherwise.
    pub use_robust: bool,
    /// Degrees of freedom are reported capped at this value.
    pub df_cap: f64,
}

impl Default for MiOptions {
    fn default() -> Self {
        Self { fit: FitOptions::default(), use_robust: true, df_cap: 1e6 }
    }
}

/// One pooled scalar.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct MiScalar<T> {
    pub name: String,
    /// Pooled point estimate (mean over imputations).
    pub estimate: T,
    /// Within-imputation variance `W`.
    pub within: T,
    /// Between-imputation variance `B`.
    pub between: T,
    /// Total variance `W + (1 + 1/m) B`.
    pub total: T,
    pub se: T,
    /// Combining degrees of freedom, capped.
    pub df: T,
}

/// Pooled multivariate equality test across outcomes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct EqualityTest<T: Real> {
    pub term: String,
    /// Contrast matrix `C` (k x p): successive between-outcome differences.
    pub contrast: DMatrix<T>,
    pub d1: T,
    /// Numerator degrees of freedom (contrast rows).
    pub k: usize,
    /// Denominator degrees of freedom.
    pub df_denominator: f64,
    pub p_value: f64,
    /// Average relative increase in variance due to the imputations.
    pub r: f64,
}

/// Per-imputation fits plus pooled estimates and tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct MiFitResult<T: Real> {
    /// Number of plausible values requested.
    pub n_imputations: usize,
    /// Plausible-value index (1-based) of each stored fit.
    pub pv_indices: Vec<usize>,
    pub fits: Vec<FitResult<T>>,
    /// Convergence flag per stored fit.
    pub converged: Vec<bool>,
    /// Pooled fixed effects, one row per coefficient.
    pub coefficients: Vec<MiScalar<T>>,
    /// Pooled covariance parameters (`vech Sigma`, then `vech T`), combined
    /// on the variance scale and reported descriptively.
    pub cov_params: Vec<MiScalar<T>>,
    pub sigma_combined: DMatrix<T>,
    pub tau_combined: DMatrix<T>,
    /// Equality-of-coefficients tests for every term with one coefficient
    /// per outcome (intercepts included).
    pub tests: Vec<EqualityTest<T>>,
    pub warnings: Vec<String>,
    /// True when every imputation converged.
    pub all_converged: bool,
}

/// Scalar combining rules. `df` is `(m - 1)(1 + W / ((1 + 1/m) B))^2`,
/// reported as the cap when `B = 0`.
pub fn rubin_scalar<T: Real>(name: &str, estimates: &[T], variances: &[T], df_cap: f64) -> MiScalar<T> {
    let m = estimates.len();
    assert!(m >= 1 && variances.len() == m);
    let mf = real::<T>(m as f64);
    let mean = estimates.iter().fold(T::zero(), |a, &v| a + v) / mf;
    let within = variances.iter().fold(T::zero(), |a, &v| a + v) / mf;
    let between = if m >= 2 {
        estimates
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / real::<T>((m - 1) as f64)
    } else {
        T::zero()
    };
    let infl = T::one() + T::one() / mf;
    let total = within + infl * between;
    let df = if between > T::zero() && m >= 2 {
        let ratio = within / (infl * between);
        let raw = real::<T>((m - 1) as f64) * (T::one() + ratio) * (T::one() + ratio);
        raw.min(real(df_cap))
    } else {
        real(df_cap)
    };
    MiScalar { name: name.to_string(), estimate: mean, within, between, total, se: total.sqrt(), df }
}

/// Outcome of the pooled multivariate Wald test.
#[derive(Debug, Clone)]
pub struct D1Outcome<T> {
    pub d1: T,
    pub k: usize,
    pub nu: f64,
    pub p_value: f64,
    pub r: f64,
}

/// Pooled multivariate Wald test of `H0: theta = 0` from per-imputation
/// contrast estimates and their covariances.
///
/// `W̄` is the mean within covariance, `B` the between covariance,
/// `r = (1 + 1/m) tr(B W̄^{-1}) / k`, and
/// `D1 = θ̄' W̄^{-1} θ̄ / (k (1 + r))` referenced against `F(k, nu)` with
///
/// ```text
/// nu = 4 + (t - 4) [1 + (1 - 2/t) / r]^2        for t = k (m - 1) > 4
/// nu = t (1 + 1/k) (1 + 1/r)^2 / 2              otherwise
/// ```
///
/// With `B = 0` the reference collapses to the chi-squared limit.
pub fn d1_test<T: Real>(estimates: &[DVector<T>], covariances: &[DMatrix<T>]) -> Result<D1Outcome<T>> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::Validation("d1 test needs at least 2 imputations".into()));
    }
    if covariances.len() != m {
        return Err(Error::Validation("estimates/covariances length mismatch".into()));
    }
    let k = estimates[0].len();
    let mf = real::<T>(m as f64);
    let mut mean: DVector<T> = DVector::zeros(k);
    for e in estimates {
        mean += e;
    }
    mean /= mf;
    let mut w_bar: DMatrix<T> = DMatrix::zeros(k, k);
    for u in covariances {
        w_bar += u;
    }
    w_bar /= mf;
    let mut between: DMatrix<T> = DMatrix::zeros(k, k);
    for e in estimates {
        let d = e - &mean;
        for i in 0..k {
            for j in 0..k {
                between[(i, j)] += d[i] * d[j];
            }
        }
    }
    between /= real::<T>((m - 1) as f64);

    let chol = w_bar
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Validation("singular pooled within covariance".into()))?;
    let winv_b = chol.solve(&between);
    let trace = (0..k).fold(T::zero(), |a, i| a + winv_b[(i, i)]);
    let infl = T::one() + T::one() / mf;
    let r = infl * trace / real::<T>(k as f64);
    let winv_mean = chol.solve(&mean);
    let wald = mean.dot(&winv_mean);
    let d1 = wald / (real::<T>(k as f64) * (T::one() + r));

    let r64 = as_f64(r).max(0.0);
    let k64 = k as f64;
    let t = k64 * (m as f64 - 1.0);
    let (nu, p_value) = if r64 <= 0.0 {
        (f64::INFINITY, dist::chi2_sf(as_f64(wald), k64))
    } else {
        let nu = if t > 4.0 {
            4.0 + (t - 4.0) * (1.0 + (1.0 - 2.0 / t) / r64).powi(2)
        } else {
            t * (1.0 + 1.0 / k64) * (1.0 + 1.0 / r64).powi(2) / 2.0
        };
        let p = if nu > 1e7 {
            dist::chi2_sf(k64 * as_f64(d1), k64)
        } else {
            dist::f_sf(as_f64(d1), k64, nu)
        };
        (nu, p)
    };
    Ok(D1Outcome { d1, k, nu, p_value, r: r64 })
}

/// Column indices of a term's per-outcome coefficients; errors when the term
/// is shared across outcomes or missing on some outcome.
pub fn outcome_columns_of(coef: &[CoefInfo], m: usize, term: &str) -> Result<Vec<usize>> {
    if coef.iter().any(|c| c.term == term && c.outcome.is_none()) {
        return Err(Error::Validation(format!(
            "term `{term}` is constrained shared across outcomes; nothing to test"
        )));
    }
    (0..m)
        .map(|k| {
            coef.iter()
                .position(|c| c.term == term && c.outcome == Some(k))
                .ok_or_else(|| {
                    Error::Validation(format!("term `{term}` has no coefficient on outcome {k}"))
                })
        })
        .collect()
}

/// Contrast matrix with `M - 1` rows encoding successive differences of a
/// term's coefficients across outcomes; `C beta = 0` iff they are all equal.
pub fn equality_contrast<T: Real>(
    coef: &[CoefInfo],
    m: usize,
    p: usize,
    term: &str,
) -> Result<DMatrix<T>> {
    if m < 2 {
        return Err(Error::Validation("equality test needs at least 2 outcomes".into()));
    }
    let cols = outcome_columns_of(coef, m, term)?;
    let mut c = DMatrix::zeros(m - 1, p);
    for row in 0..m - 1 {
        c[(row, cols[row])] = T::one();
        c[(row, cols[row + 1])] = -T::one();
    }
    Ok(c)
}

/// Pooled equality test of a term's coefficients across outcomes.
pub fn test_equality<T: Real>(mi: &MiFitResult<T>, term: &str, use_robust: bool) -> Result<EqualityTest<T>> {
    let fits: Vec<&FitResult<T>> = mi
        .fits
        .iter()
        .zip(&mi.converged)
        .filter(|(_, &c)| c)
        .map(|(f, _)| f)
        .collect();
    if fits.len() < 2 {
        return Err(Error::Validation(
            "equality test needs at least 2 converged imputations".into(),
        ));
    }
    let first = fits[0];
    let m = first.outcomes.len();
    let p = first.beta.len();
    let contrast = equality_contrast::<T>(&first.coef, m, p, term)?;
    let estimates: Vec<DVector<T>> = fits.iter().map(|f| &contrast * &f.beta).collect();
    let covariances: Vec<DMatrix<T>> = fits
        .iter()
        .map(|f| &contrast * f.cov_reporting(use_robust) * contrast.transpose())
        .collect();
    let out = d1_test(&estimates, &covariances)?;
    Ok(EqualityTest {
        term: term.to_string(),
        contrast,
        d1: out.d1,
        k: out.k,
        df_denominator: out.nu,
        p_value: out.p_value,
        r: out.r,
    })
}

/// Fits the model once per plausible value and pools the results.
///
/// Transforms must already be applied to `data` (see
/// [`crate::data::prepare_dataset`]); the fits are independent and run in
/// parallel.
pub fn fit_mi<T: Real>(data: &Dataset<T>, spec: &ModelSpec, opts: &MiOptions) -> Result<MiFitResult<T>> {
    let m_pv = data.n_pv;
    if m_pv < 2 {
        return Err(Error::Validation(format!(
            "multiple-imputation fitting needs at least 2 plausible values, found {m_pv}"
        )));
    }
    let designs: Vec<StackedDesign<T>> = (1..=m_pv)
        .map(|pv| build_design(data, spec, pv))
        .collect::<Result<_>>()?;
    let fit_opts = opts.fit;
    let attempts: Vec<(usize, Result<FitResult<T>>)> = designs
        .par_iter()
        .enumerate()
        .map(|(i, design)| (i + 1, fit_ml(design, &fit_opts)))
        .collect();

    let mut warnings = Vec::new();
    let mut pv_indices = Vec::new();
    let mut fits = Vec::new();
    let mut converged = Vec::new();
    for (pv, attempt) in attempts {
        match attempt {
            Ok(fit) => {
                if !fit.convergence.converged {
                    warnings.push(format!(
                        "plausible value {pv}: optimizer stopped with {:?}; excluded from pooling",
                        fit.convergence.status
                    ));
                }
                converged.push(fit.convergence.converged);
                pv_indices.push(pv);
                fits.push(fit);
            }
            Err(err) => {
                warnings.push(format!("plausible value {pv}: fit failed: {err}"));
            }
        }
    }
    if fits.is_empty() {
        return Err(Error::Validation("all imputations failed to fit".into()));
    }
    let pooled: Vec<&FitResult<T>> =
        fits.iter().zip(&converged).filter(|(_, &c)| c).map(|(f, _)| f).collect();
    let pooled = if pooled.is_empty() {
        warnings.push("no imputation converged; pooling over best iterates".into());
        fits.iter().collect::<Vec<_>>()
    } else {
        pooled
    };
    if pooled.len() < fits.len() {
        // Already warned per imputation.
    }

    let first = pooled[0];
    let p = first.beta.len();
    let use_robust = opts.use_robust;
    if use_robust && pooled.iter().any(|f| f.cov_robust.is_none()) {
        warnings.push("robust covariance unavailable for some imputations; using model-based".into());
    }
    let mut coefficients = Vec::with_capacity(p);
    for i in 0..p {
        let estimates: Vec<T> = pooled.iter().map(|f| f.beta[i]).collect();
        let variances: Vec<T> =
            pooled.iter().map(|f| f.cov_reporting(use_robust)[(i, i)]).collect();
        coefficients.push(rubin_scalar(&first.coef[i].name, &estimates, &variances, opts.df_cap));
    }

    let names = cov_param_names(&first.outcomes);
    let n_cov = names.len();
    let mut cov_params = Vec::with_capacity(n_cov);
    let have_param_cov = pooled.iter().all(|f| f.cov_params.is_some());
    if !have_param_cov {
        warnings.push(
            "covariance-parameter information unavailable for some imputations; their pooled \
             standard errors use the between-imputation variance only"
                .into(),
        );
    }
    for i in 0..n_cov {
        let estimates: Vec<T> = pooled.iter().map(|f| f.cov_param_values()[i]).collect();
        let variances: Vec<T> = pooled
            .iter()
            .map(|f| f.cov_params.as_ref().map(|c| c[(i, i)]).unwrap_or(T::zero()))
            .collect();
        cov_params.push(rubin_scalar(&names[i], &estimates, &variances, opts.df_cap));
    }

    let mm = first.outcomes.len();
    let mut sigma_combined: DMatrix<T> = DMatrix::zeros(mm, mm);
    let mut tau_combined: DMatrix<T> = DMatrix::zeros(mm, mm);
    for f in &pooled {
        sigma_combined += &f.sigma;
        tau_combined += &f.tau;
    }
    let count = real::<T>(pooled.len() as f64);
    sigma_combined /= count;
    tau_combined /= count;

    let mut result = MiFitResult {
        n_imputations: m_pv,
        pv_indices,
        all_converged: converged.iter().all(|&c| c) && fits.len() == m_pv,
        fits,
        converged,
        coefficients,
        cov_params,
        sigma_combined,
        tau_combined,
        tests: Vec::new(),
        warnings,
    };

    // Equality tests for every term with a full set of per-outcome
    // coefficients.
    let mut seen = Vec::new();
    for info in &result.fits[0].coef.clone() {
        if seen.contains(&info.term) {
            continue;
        }
        seen.push(info.term.clone());
        if outcome_columns_of(&result.fits[0].coef, mm, &info.term).is_ok() && mm >= 2 {
            match test_equality(&result, &info.term, use_robust) {
                Ok(test) => result.tests.push(test),
                Err(err) => result.warnings.push(format!(
                    "equality test for `{}` skipped: {err}",
                    info.term
                )),
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn rubin_hand_example() {
        let out = rubin_scalar("x", &[1.0, 3.0], &[1.0, 1.0], 1e6);
        assert_eq!(out.estimate, 2.0);
        assert_eq!(out.within, 1.0);
        assert_eq!(out.between, 2.0);
        assert_eq!(out.total, 4.0);
        assert_relative_eq!(out.df, 16.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_imputations_have_zero_between() {
        let out = rubin_scalar("x", &[2.5; 5], &[0.4; 5], 1e6);
        assert_eq!(out.between, 0.0);
        assert_eq!(out.total, out.within);
        assert_eq!(out.df, 1e6);
    }

    #[test]
    fn combining_is_permutation_invariant_and_monotone_in_b() {
        let a = rubin_scalar("x", &[1.0, 2.0, 4.0], &[0.5, 0.7, 0.6], 1e6);
        let b = rubin_scalar("x", &[4.0, 1.0, 2.0], &[0.6, 0.5, 0.7], 1e6);
        assert_eq!(a.estimate, b.estimate);
        assert_relative_eq!(a.total, b.total, epsilon = 1e-12);

        let narrow = rubin_scalar("x", &[2.0, 2.1, 1.9], &[0.5, 0.5, 0.5], 1e6);
        let wide = rubin_scalar("x", &[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5], 1e6);
        assert!(wide.total > narrow.total);
    }

    #[test]
    fn d1_zero_estimate_gives_unit_p() {
        let estimates = vec![dvector![0.0, 0.0]; 3];
        let covs = vec![DMatrix::identity(2, 2); 3];
        let out = d1_test(&estimates, &covs).unwrap();
        assert_eq!(out.d1, 0.0);
        assert_eq!(out.p_value, 1.0);
    }

    #[test]
    fn d1_with_k1_matches_scalar_rule() {
        // m = 5 scalar imputations: D1 must equal the squared MI t statistic
        // and the denominator df must equal the scalar combining df.
        let est = [1.2, 0.8, 1.5, 1.0, 0.9];
        let var = [0.3, 0.35, 0.28, 0.31, 0.33];
        let scalar = rubin_scalar("x", &est, &var, 1e12);
        let t2 = scalar.estimate * scalar.estimate / scalar.total;

        let estimates: Vec<DVector<f64>> = est.iter().map(|&e| dvector![e]).collect();
        let covs: Vec<DMatrix<f64>> = var.iter().map(|&v| dmatrix![v]).collect();
        let out = d1_test(&estimates, &covs).unwrap();
        assert_relative_eq!(out.d1, t2, epsilon = 1e-12);

        let m = 5.0;
        let r = (1.0 + 1.0 / m) * scalar.between / scalar.within;
        let scalar_df = (m - 1.0) * (1.0 + 1.0 / r).powi(2);
        assert_relative_eq!(out.nu, scalar_df, max_relative = 1e-10);
    }

    #[test]
    fn d1_invariant_under_contrast_reparameterization() {
        // Simulated contrast estimates (k = 2) and a nonsingular G.
        let estimates = vec![dvector![0.4, -0.2], dvector![0.6, 0.1], dvector![0.3, -0.1]];
        let covs = vec![
            dmatrix![0.30, 0.05; 0.05, 0.20],
            dmatrix![0.28, 0.04; 0.04, 0.22],
            dmatrix![0.33, 0.06; 0.06, 0.19],
        ];
        let base = d1_test(&estimates, &covs).unwrap();

        let g = dmatrix![2.0, 1.0; -0.5, 3.0];
        let estimates_g: Vec<DVector<f64>> = estimates.iter().map(|e| &g * e).collect();
        let covs_g: Vec<DMatrix<f64>> = covs.iter().map(|u| &g * u * g.transpose()).collect();
        let trans = d1_test(&estimates_g, &covs_g).unwrap();
        assert_relative_eq!(base.d1, trans.d1, max_relative = 1e-10);
        assert_relative_eq!(base.p_value, trans.p_value, max_relative = 1e-8);
    }

    #[test]
    fn d1_identical_imputations_match_single_fit_wald() {
        let theta = dvector![0.7, -0.4, 0.2];
        let u = dmatrix![0.30, 0.02, 0.01; 0.02, 0.25, 0.03; 0.01, 0.03, 0.28];
        let estimates = vec![theta.clone(); 4];
        let covs = vec![u.clone(); 4];
        let out = d1_test(&estimates, &covs).unwrap();
        let wald = theta.dot(&u.clone().cholesky().unwrap().solve(&theta));
        assert_relative_eq!(3.0 * out.d1, wald, epsilon = 1e-8);
        assert_relative_eq!(out.p_value, dist::chi2_sf(wald, 3.0), epsilon = 1e-10);
    }

    #[test]
    fn contrast_shapes_and_nullspace() {
        let coef: Vec<CoefInfo> = {
            let mut v = Vec::new();
            for k in 0..3 {
                v.push(CoefInfo {
                    name: format!("o{k}:intercept"),
                    term: "intercept".into(),
                    outcome: Some(k),
                });
            }
            for k in 0..3 {
                v.push(CoefInfo { name: format!("o{k}:female"), term: "female".into(), outcome: Some(k) });
            }
            v.push(CoefInfo { name: "shared:z".into(), term: "z".into(), outcome: None });
            v
        };
        let c = equality_contrast::<f64>(&coef, 3, 7, "female").unwrap();
        assert_eq!(c.nrows(), 2);
        assert_eq!(c.ncols(), 7);
        assert_eq!(c[(0, 3)], 1.0);
        assert_eq!(c[(0, 4)], -1.0);
        assert_eq!(c[(1, 4)], 1.0);
        assert_eq!(c[(1, 5)], -1.0);

        // Equal coefficients are annihilated.
        let beta = dvector![10.0, 8.0, 9.0, 2.5, 2.5, 2.5, 1.0];
        let cb = &c * beta;
        assert_eq!(cb, dvector![0.0, 0.0]);

        assert!(equality_contrast::<f64>(&coef, 3, 7, "z").is_err());

        let c2 = equality_contrast::<f64>(&coef[..4], 2, 4, "intercept").unwrap();
        assert_eq!(c2.nrows(), 1);
    }
}
