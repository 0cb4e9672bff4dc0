//! Maximum-likelihood fitting and post-fit covariance machinery.
//!
//! [`fit_ml`] maximizes the beta-profiled log-likelihood over the
//! log-Cholesky covariance coordinates with BFGS, then recovers the GLS
//! coefficients, the model-based coefficient covariance, the school-clustered
//! sandwich covariance, and (optionally) an observed-information covariance
//! for the variance-covariance parameters themselves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{lower_triangle_indices, CovarianceParams};
use crate::design::{CoefInfo, StackedDesign};
use crate::error::{Error, Result};
use crate::likelihood::{grad_loglik, CovContext, DesignStats, GradientMethod};
use crate::optim;
use crate::scalar::{as_f64, real, Real};

/// Optimizer and covariance options. Tolerances are in `f64` regardless of
/// the working scalar; they are converted at use.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative log-likelihood change tolerance.
    pub tol_loglik: f64,
    /// Gradient infinity-norm tolerance.
    pub tol_grad: f64,
    pub gradient: GradientMethod,
    /// Estimate the covariance of the (Sigma, T) estimates from the observed
    /// information of the profiled likelihood.
    pub compute_param_cov: bool,
    /// Apply the K/(K-1) cluster correction to the sandwich covariance.
    pub cluster_correction: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol_loglik: 1e-10,
            tol_grad: 1e-5,
            gradient: GradientMethod::Analytic,
            compute_param_cov: true,
            cluster_correction: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub grad_norm: f64,
    pub status: optim::Status,
    pub converged: bool,
    /// Smallest eigenvalue of `T` fell under `1e-8 * trace(T)`.
    pub near_singular_tau: bool,
}

/// Fitted model: coefficients, covariance matrices, and their uncertainty.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct FitResult<T: Real> {
    pub outcomes: Vec<String>,
    pub coef: Vec<CoefInfo>,
    /// Fixed effects (score points).
    pub beta: DVector<T>,
    /// Within-class residual covariance (score points squared).
    pub sigma: DMatrix<T>,
    /// Between-class covariance (score points squared).
    pub tau: DMatrix<T>,
    pub log_lik: T,
    /// Model-based coefficient covariance `(X' V^{-1} X)^{-1}`.
    pub cov_model: DMatrix<T>,
    /// School-clustered sandwich covariance; `None` with a single school.
    pub cov_robust: Option<DMatrix<T>>,
    /// Covariance of the stacked `[vech Sigma; vech T]` estimates from the
    /// observed information; `None` when unavailable.
    pub cov_params: Option<DMatrix<T>>,
    pub convergence: Convergence,
    pub n_students: usize,
    pub n_classes: usize,
}

impl<T: Real> FitResult<T> {
    pub fn covariance_params(&self) -> CovarianceParams<T> {
        CovarianceParams { sigma: self.sigma.clone(), tau: self.tau.clone() }
    }

    /// Coefficient covariance to report: robust when present, else model.
    pub fn cov_reporting(&self, robust: bool) -> &DMatrix<T> {
        if robust {
            self.cov_robust.as_ref().unwrap_or(&self.cov_model)
        } else {
            &self.cov_model
        }
    }

    /// Stacked `[vech Sigma; vech T]` point estimates, in the packing order
    /// of [`lower_triangle_indices`].
    pub fn cov_param_values(&self) -> DVector<T> {
        let idx = lower_triangle_indices(self.sigma.nrows());
        let mut out = DVector::zeros(2 * idx.len());
        for (k, &(i, j)) in idx.iter().enumerate() {
            out[k] = self.sigma[(i, j)];
            out[idx.len() + k] = self.tau[(i, j)];
        }
        out
    }
}

/// Display names for the stacked covariance parameters.
pub fn cov_param_names(outcomes: &[String]) -> Vec<String> {
    let idx = lower_triangle_indices(outcomes.len());
    let mut names = Vec::with_capacity(2 * idx.len());
    for which in ["sigma", "tau"] {
        for &(i, j) in &idx {
            names.push(format!("{which}[{},{}]", outcomes[i], outcomes[j]));
        }
    }
    names
}

/// Moment-based starting values: OLS residual pooled within-class covariance
/// for `Sigma`, the covariance of class-mean residuals (floored to PD) for
/// `T`.
pub fn starting_values<T: Real>(design: &StackedDesign<T>) -> Result<CovarianceParams<T>> {
    let (m, p) = (design.m, design.p);
    let mut xtx: DMatrix<T> = DMatrix::zeros(p, p);
    let mut xty: DVector<T> = DVector::zeros(p);
    for class in &design.classes {
        xtx += class.x.transpose() * &class.x;
        xty += class.x.transpose() * &class.y;
    }
    let beta = xtx
        .cholesky()
        .ok_or_else(|| Error::RankDeficient { columns: design.collinear_columns() })?
        .solve(&xty);

    let n_students = design.n_students();
    let n_classes = design.n_classes();
    let mut s_within: DMatrix<T> = DMatrix::zeros(m, m);
    let mut rbar_all: Vec<DVector<T>> = Vec::with_capacity(n_classes);
    for class in &design.classes {
        let r = &class.y - &class.x * &beta;
        let mut rbar = DVector::zeros(m);
        for i in 0..class.n {
            for a in 0..m {
                rbar[a] += r[i * m + a];
            }
        }
        rbar /= real::<T>(class.n as f64);
        for i in 0..class.n {
            for a in 0..m {
                for b in 0..m {
                    s_within[(a, b)] +=
                        (r[i * m + a] - rbar[a]) * (r[i * m + b] - rbar[b]);
                }
            }
        }
        rbar_all.push(rbar);
    }
    let denom = (n_students.saturating_sub(n_classes)).max(1);
    s_within /= real::<T>(denom as f64);
    let sigma0 = floor_to_pd(&s_within, real::<T>(1e-8));

    let mut mean_rbar: DVector<T> = DVector::zeros(m);
    for rbar in &rbar_all {
        mean_rbar += rbar;
    }
    mean_rbar /= real::<T>(n_classes as f64);
    let mut s_between: DMatrix<T> = DMatrix::zeros(m, m);
    for rbar in &rbar_all {
        let d = rbar - &mean_rbar;
        for a in 0..m {
            for b in 0..m {
                s_between[(a, b)] += d[a] * d[b];
            }
        }
    }
    s_between /= real::<T>((n_classes.saturating_sub(1)).max(1) as f64);
    // Class-mean residuals carry T + Sigma / n of noise; remove the
    // within-class share for a near-consistent start, then floor to PD.
    let nbar = n_students as f64 / n_classes as f64;
    s_between -= &sigma0 * real::<T>(1.0 / nbar);
    let floor = real::<T>(0.1 / nbar)
        * sigma0.diagonal().iter().fold(T::zero(), |a, &v| a + v)
        / real::<T>(m as f64);
    let tau0 = floor_to_pd(&s_between, floor.max(real(1e-10)));
    CovarianceParams::new(sigma0, tau0)
}

/// Symmetric eigenvalue floor, relative to the matrix scale.
fn floor_to_pd<T: Real>(mat: &DMatrix<T>, floor: T) -> DMatrix<T> {
    let m = mat.nrows();
    let sym = (mat + mat.transpose()) * real::<T>(0.5);
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(T::zero(), |a, &v| a.max(v.abs())).max(T::one());
    let min_eig = floor.max(scale * real(1e-12));
    let mut out = DMatrix::zeros(m, m);
    for k in 0..m {
        let lambda = eig.eigenvalues[k].max(min_eig);
        let v = eig.eigenvectors.column(k);
        for i in 0..m {
            for j in 0..m {
                out[(i, j)] += lambda * v[i] * v[j];
            }
        }
    }
    out
}

/// Maximum-likelihood fit of the multivariate two-level model.
pub fn fit_ml<T: Real>(design: &StackedDesign<T>, opts: &FitOptions) -> Result<FitResult<T>> {
    if design.n_classes() < 2 {
        return Err(Error::Validation(format!(
            "at least 2 classes required, found {}",
            design.n_classes()
        )));
    }
    design.check_full_rank()?;
    let stats = DesignStats::new(design);
    let start = starting_values(design)?;
    let theta0 = start.to_unconstrained();

    let grad_method = opts.gradient;
    let objective = |theta: &DVector<T>| -> Result<(T, DVector<T>)> {
        match grad_method {
            GradientMethod::Analytic => {
                let c = CovarianceParams::from_unconstrained(theta, stats.m)?;
                let (eval, grad) = stats.profiled_grad(&c)?;
                Ok((eval.log_l, grad))
            }
            method => {
                let value = crate::likelihood::profiled_loglik(theta, &stats)?;
                let grad = grad_loglik(theta, &stats, method)?;
                Ok((value, grad))
            }
        }
    };
    let optim_opts = optim::Options {
        max_iter: opts.max_iter,
        tol_f_rel: real(opts.tol_loglik),
        tol_grad: real(opts.tol_grad),
        ..optim::Options::default()
    };
    let mut outcome = optim::maximize(objective, theta0, &optim_opts)?;
    // The line search cannot measure improvements below the objective's
    // noise floor; a few Newton steps on the stationarity system finish the
    // job when the iterate is already close.
    if outcome.status != optim::Status::Converged
        && outcome.grad_norm <= real::<T>(1e4) * optim_opts.tol_grad
    {
        optim::newton_polish(objective, &mut outcome, optim_opts.tol_grad, 8)?;
    }

    let c_hat = CovarianceParams::from_unconstrained(&outcome.x, stats.m)?;
    let (beta, cov_model) = crate::likelihood::profile_beta_gls(&c_hat, design)?;

    let tau_eig = c_hat.tau.clone().symmetric_eigenvalues();
    let tau_trace = c_hat.tau.diagonal().iter().fold(T::zero(), |a, &v| a + v);
    let near_singular_tau =
        tau_eig.iter().any(|&l| l < real::<T>(1e-8) * tau_trace);

    let convergence = Convergence {
        iterations: outcome.iterations,
        grad_norm: as_f64(outcome.grad_norm),
        status: outcome.status,
        converged: outcome.status == optim::Status::Converged,
        near_singular_tau,
    };

    let n_schools = {
        let mut ids: Vec<&str> =
            design.classes.iter().map(|c| c.school_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };

    let mut fit = FitResult {
        outcomes: design.outcomes.clone(),
        coef: design.coef.clone(),
        beta,
        sigma: c_hat.sigma.clone(),
        tau: c_hat.tau.clone(),
        log_lik: outcome.value,
        cov_model,
        cov_robust: None,
        cov_params: None,
        convergence,
        n_students: design.n_students(),
        n_classes: design.n_classes(),
    };
    if n_schools >= 2 {
        fit.cov_robust =
            Some(robust_cluster_cov(&fit, design, opts.cluster_correction)?);
    }
    if opts.compute_param_cov {
        fit.cov_params = param_covariance(&stats, &c_hat);
    }
    Ok(fit)
}

/// School-clustered sandwich covariance
/// `C_model (sum_k s_k s_k') C_model` with per-school score sums
/// `s_k = sum_{j in k} X_j' V_j^{-1} (y_j - X_j beta)`.
pub fn robust_cluster_cov<T: Real>(
    fit: &FitResult<T>,
    design: &StackedDesign<T>,
    cluster_correction: bool,
) -> Result<DMatrix<T>> {
    let (m, p) = (design.m, design.p);
    let c = fit.covariance_params();
    let ctx = CovContext::new(&c, design.classes.iter().map(|b| b.n))?;

    let mut schools: Vec<(&str, DVector<T>)> = Vec::new();
    for class in &design.classes {
        let score = class_score(&ctx, class, m, p, &fit.beta);
        match schools.iter_mut().find(|(id, _)| *id == class.school_id.as_str()) {
            Some((_, acc)) => *acc += score,
            None => schools.push((class.school_id.as_str(), score)),
        }
    }
    if schools.len() < 2 {
        return Err(Error::Validation(
            "clustered covariance needs at least 2 schools".into(),
        ));
    }
    let mut meat: DMatrix<T> = DMatrix::zeros(p, p);
    for (_, s) in &schools {
        for i in 0..p {
            for j in 0..p {
                meat[(i, j)] += s[i] * s[j];
            }
        }
    }
    if cluster_correction {
        let k = schools.len() as f64;
        meat *= real::<T>(k / (k - 1.0));
    }
    let sandwich = &fit.cov_model * meat * &fit.cov_model;
    // Symmetrize against accumulated round-off.
    Ok((&sandwich + sandwich.transpose()) * real::<T>(0.5))
}

/// `X_j' V_j^{-1} r_j` through the projector decomposition.
fn class_score<T: Real>(
    ctx: &CovContext<T>,
    class: &crate::design::ClassBlock<T>,
    m: usize,
    p: usize,
    beta: &DVector<T>,
) -> DVector<T> {
    let n = class.n;
    let a_n = &ctx.per_size[&n].a;
    let r = &class.y - &class.x * beta;
    let inv_n = T::one() / real::<T>(n as f64);
    let mut rbar = DVector::zeros(m);
    let mut xbar = DMatrix::zeros(m, p);
    for i in 0..n {
        for a in 0..m {
            rbar[a] += r[i * m + a];
            for q in 0..p {
                xbar[(a, q)] += class.x[(i * m + a, q)];
            }
        }
    }
    rbar *= inv_n;
    xbar *= inv_n;

    let mut score = DVector::zeros(p);
    let mut centered = DVector::zeros(m);
    for i in 0..n {
        for a in 0..m {
            centered[a] = r[i * m + a] - rbar[a];
        }
        let k = &ctx.sigma_inv * &centered;
        for a in 0..m {
            for q in 0..p {
                score[q] += (class.x[(i * m + a, q)] - xbar[(a, q)]) * k[a];
            }
        }
    }
    let k = a_n * &rbar * real::<T>(n as f64);
    for a in 0..m {
        for q in 0..p {
            score[q] += xbar[(a, q)] * k[a];
        }
    }
    score
}

/// Observed-information covariance of `[vech Sigma; vech T]` by central
/// second differences of the profiled likelihood. Returns `None` when a
/// perturbed evaluation leaves the PD cone or the information is not
/// invertible.
fn param_covariance<T: Real>(
    stats: &DesignStats<T>,
    c: &CovarianceParams<T>,
) -> Option<DMatrix<T>> {
    let m = stats.m;
    let idx = lower_triangle_indices(m);
    let k = 2 * idx.len();
    let z0 = {
        let mut z = DVector::zeros(k);
        for (t, &(i, j)) in idx.iter().enumerate() {
            z[t] = c.sigma[(i, j)];
            z[idx.len() + t] = c.tau[(i, j)];
        }
        z
    };
    let eval = |z: &DVector<T>| -> Option<T> {
        let mut sigma = DMatrix::zeros(m, m);
        let mut tau = DMatrix::zeros(m, m);
        for (t, &(i, j)) in idx.iter().enumerate() {
            sigma[(i, j)] = z[t];
            sigma[(j, i)] = z[t];
            tau[(i, j)] = z[idx.len() + t];
            tau[(j, i)] = z[idx.len() + t];
        }
        let params = CovarianceParams { sigma, tau };
        stats.profiled(&params).ok().map(|e| e.log_l)
    };

    let f0 = eval(&z0)?;
    let h: Vec<T> = (0..k)
        .map(|t| real::<T>(1e-4) * (T::one() + z0[t].abs()))
        .collect();
    let mut hess = DMatrix::zeros(k, k);
    let mut z = z0.clone();
    for a in 0..k {
        z[a] = z0[a] + h[a];
        let fp = eval(&z)?;
        z[a] = z0[a] - h[a];
        let fm = eval(&z)?;
        z[a] = z0[a];
        hess[(a, a)] = (fp - real::<T>(2.0) * f0 + fm) / (h[a] * h[a]);
        for b in (a + 1)..k {
            z[a] = z0[a] + h[a];
            z[b] = z0[b] + h[b];
            let fpp = eval(&z)?;
            z[b] = z0[b] - h[b];
            let fpm = eval(&z)?;
            z[a] = z0[a] - h[a];
            let fmm = eval(&z)?;
            z[b] = z0[b] + h[b];
            let fmp = eval(&z)?;
            z[a] = z0[a];
            z[b] = z0[b];
            let v = (fpp - fpm - fmp + fmm) / (real::<T>(4.0) * h[a] * h[b]);
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    let info = -hess;
    info.cholesky().map(|chol| chol.inverse())
}

/// Within/between correlation matrices, percent-between decomposition, and
/// per-outcome intraclass correlations (in percent).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct DecompositionReport<T: Real> {
    pub outcomes: Vec<String>,
    pub within_corr: DMatrix<T>,
    pub between_corr: DMatrix<T>,
    pub total_corr: DMatrix<T>,
    /// `100 * T_ab / (Sigma_ab + T_ab)` elementwise.
    pub pct_between: DMatrix<T>,
    /// `100 * tau_m^2 / (sigma_m^2 + tau_m^2)` per outcome.
    pub icc: Vec<T>,
}

fn correlation<T: Real>(cov: &DMatrix<T>) -> DMatrix<T> {
    let m = cov.nrows();
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            out[(i, j)] = cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt();
        }
    }
    out
}

/// Correlation decomposition of a fitted covariance pair.
pub fn decompose<T: Real>(fit: &FitResult<T>) -> DecompositionReport<T> {
    let total = &fit.sigma + &fit.tau;
    let m = fit.sigma.nrows();
    let hundred = real::<T>(100.0);
    let mut pct_between = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            pct_between[(i, j)] = hundred * fit.tau[(i, j)] / total[(i, j)];
        }
    }
    let icc = (0..m)
        .map(|i| hundred * fit.tau[(i, i)] / total[(i, i)])
        .collect();
    DecompositionReport {
        outcomes: fit.outcomes.clone(),
        within_corr: correlation(&fit.sigma),
        between_corr: correlation(&fit.tau),
        total_corr: correlation(&total),
        pct_between,
        icc,
    }
}

/// Per-outcome variance reductions of a full model against a null model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct VarianceExplained<T: Real> {
    pub outcomes: Vec<String>,
    /// `100 (1 - sigma_full^2 / sigma_null^2)` per outcome.
    pub within_reduction_pct: Vec<T>,
    /// `100 (1 - tau_full^2 / tau_null^2)` per outcome.
    pub between_reduction_pct: Vec<T>,
    /// Residual ICC of the full model, percent.
    pub residual_icc_pct: Vec<T>,
}

/// Variance explained by covariates, relative to a null fit on the same
/// responses. Reductions may be negative and are reported as such.
pub fn variance_explained<T: Real>(
    null: &FitResult<T>,
    full: &FitResult<T>,
) -> Result<VarianceExplained<T>> {
    if null.outcomes != full.outcomes {
        return Err(Error::Validation(format!(
            "outcome mismatch: null fits {:?}, full fits {:?}",
            null.outcomes, full.outcomes
        )));
    }
    let m = null.outcomes.len();
    let hundred = real::<T>(100.0);
    let mut within = Vec::with_capacity(m);
    let mut between = Vec::with_capacity(m);
    let mut icc = Vec::with_capacity(m);
    for i in 0..m {
        within.push(hundred * (T::one() - full.sigma[(i, i)] / null.sigma[(i, i)]));
        between.push(hundred * (T::one() - full.tau[(i, i)] / null.tau[(i, i)]));
        icc.push(hundred * full.tau[(i, i)] / (full.sigma[(i, i)] + full.tau[(i, i)]));
    }
    Ok(VarianceExplained {
        outcomes: null.outcomes.clone(),
        within_reduction_pct: within,
        between_reduction_pct: between,
        residual_icc_pct: icc,
    })
}
