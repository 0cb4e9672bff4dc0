//! Exact marginal log-likelihood, profiled GLS, and gradients.
//!
//! With student-major stacking the class-level marginal covariance is
//! `V_j = I_n (x) Sigma + J_n (x) T`. Writing `P1 = J_n / n` for the
//! projector onto the within-class mean and `A_n = (Sigma + n T)^{-1}`, the
//! inverse and log-determinant have closed forms
//!
//! ```text
//! V_j^{-1} = P1 (x) A_n + (I - P1) (x) Sigma^{-1}
//! log|V_j| = log|Sigma + n T| + (n - 1) log|Sigma|
//! ```
//!
//! so every per-class quantity reduces to the class mean residual and the
//! within-class centered scatter. [`DesignStats`] aggregates the design once
//! into `O(M^2 p^2)` sufficient statistics (per distinct class size), after
//! which a profiled likelihood or gradient evaluation costs the same
//! regardless of the number of students.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::covariance::{ill_conditioned, lower_triangle_indices, CovarianceParams};
use crate::design::StackedDesign;
use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, real, Real};

/// Log-likelihood with its per-class decomposition.
#[derive(Debug, Clone)]
pub struct LikelihoodValue<T> {
    pub log_l: T,
    /// One contribution per class, in design order; their (pairwise) sum is
    /// `log_l` by construction.
    pub per_class: Vec<T>,
}

/// `A_n = (Sigma + n T)^{-1}` and `log|V_j|` for a class of size `n`.
pub fn marginal_blocks<T: Real>(c: &CovarianceParams<T>, n: usize) -> Result<(DMatrix<T>, T)> {
    if n == 0 {
        return Err(Error::Validation("class size must be at least 1".into()));
    }
    let ctx = CovContext::new(c, [n].into_iter())?;
    let block = &ctx.per_size[&n];
    let n1 = real::<T>((n - 1) as f64);
    Ok((block.a.clone(), block.logdet_w + n1 * ctx.logdet_sigma))
}

/// Shared per-evaluation factorizations: `Sigma^{-1}` and one block per
/// distinct class size.
pub(crate) struct CovContext<T: Real> {
    pub sigma_inv: DMatrix<T>,
    pub logdet_sigma: T,
    pub per_size: BTreeMap<usize, SizeBlock<T>>,
}

pub(crate) struct SizeBlock<T> {
    /// `(Sigma + n T)^{-1}`.
    pub a: DMatrix<T>,
    /// `log|Sigma + n T|`.
    pub logdet_w: T,
}

impl<T: Real> CovContext<T> {
    pub fn new(c: &CovarianceParams<T>, sizes: impl Iterator<Item = usize>) -> Result<Self> {
        let chol = c
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| ill_conditioned(&c.sigma, "sigma"))?;
        let logdet_sigma = chol_logdet(&chol);
        let sigma_inv = chol.inverse();
        let mut per_size = BTreeMap::new();
        for n in sizes {
            per_size.entry(n).or_insert_with(|| SizeBlock {
                a: DMatrix::zeros(0, 0),
                logdet_w: T::zero(),
            });
        }
        for (&n, block) in per_size.iter_mut() {
            let w = &c.sigma + &c.tau * real::<T>(n as f64);
            let chol = w
                .clone()
                .cholesky()
                .ok_or_else(|| ill_conditioned(&w, &format!("sigma + {n} tau")))?;
            block.logdet_w = chol_logdet(&chol);
            block.a = chol.inverse();
        }
        Ok(Self { sigma_inv, logdet_sigma, per_size })
    }
}

fn chol_logdet<T: Real>(chol: &nalgebra::Cholesky<T, nalgebra::Dyn>) -> T {
    chol.l().diagonal().iter().map(|d| d.ln()).fold(T::zero(), |a, b| a + b) * real::<T>(2.0)
}

/// Exact marginal log-likelihood at `(Sigma, T, beta)` with per-class
/// contributions, evaluated through the closed-form block structure.
pub fn log_likelihood<T: Real>(
    c: &CovarianceParams<T>,
    beta: &DVector<T>,
    design: &StackedDesign<T>,
) -> Result<LikelihoodValue<T>> {
    let m = design.m;
    let ctx = CovContext::new(c, design.classes.iter().map(|b| b.n))?;
    let two_pi_ln = real::<T>(std::f64::consts::TAU).ln();
    let half = real::<T>(0.5);
    let mut per_class = Vec::with_capacity(design.n_classes());
    for class in &design.classes {
        let n = class.n;
        let block = &ctx.per_size[&n];
        let inv_n = T::one() / real::<T>(n as f64);

        // Per-student residual vectors and their class mean.
        let r = &class.y - &class.x * beta;
        let mut rbar = DVector::zeros(m);
        for i in 0..n {
            for a in 0..m {
                rbar[a] += r[i * m + a];
            }
        }
        rbar *= inv_n;

        let mut q_within = T::zero();
        let mut centered = DVector::zeros(m);
        for i in 0..n {
            for a in 0..m {
                centered[a] = r[i * m + a] - rbar[a];
            }
            q_within += quad_form(&ctx.sigma_inv, &centered);
        }
        let q_between = real::<T>(n as f64) * quad_form(&block.a, &rbar);
        let n1 = real::<T>((n - 1) as f64);
        let logdet = block.logdet_w + n1 * ctx.logdet_sigma;
        let dim = real::<T>((m * n) as f64);
        per_class.push(-half * (dim * two_pi_ln + logdet + q_within + q_between));
    }
    let log_l = pairwise_sum(&per_class);
    Ok(LikelihoodValue { log_l, per_class })
}

fn quad_form<T: Real>(a: &DMatrix<T>, v: &DVector<T>) -> T {
    let m = v.len();
    let mut acc = T::zero();
    for i in 0..m {
        for j in 0..m {
            acc += v[i] * a[(i, j)] * v[j];
        }
    }
    acc
}

/// Profiled GLS fixed effects and model-based covariance
/// `(sum_j X_j' V_j^{-1} X_j)^{-1}`, via the projector decomposition.
pub fn profile_beta_gls<T: Real>(
    c: &CovarianceParams<T>,
    design: &StackedDesign<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let (m, p) = (design.m, design.p);
    let ctx = CovContext::new(c, design.classes.iter().map(|b| b.n))?;
    let mut xtvx: DMatrix<T> = DMatrix::zeros(p, p);
    let mut xtvy: DVector<T> = DVector::zeros(p);
    let mut cx = DMatrix::zeros(m, p);
    let mut cy = DVector::zeros(m);
    for class in &design.classes {
        let n = class.n;
        let a_n = &ctx.per_size[&n].a;
        let inv_n = T::one() / real::<T>(n as f64);
        let (xbar, ybar) = class_means(class, m, p);

        for i in 0..n {
            for a in 0..m {
                cy[a] = class.y[i * m + a] - ybar[a];
                for q in 0..p {
                    cx[(a, q)] = class.x[(i * m + a, q)] - xbar[(a, q)];
                }
            }
            accumulate_cross(&mut xtvx, &mut xtvy, &ctx.sigma_inv, &cx, &cy, T::one());
        }
        let _ = inv_n;
        accumulate_cross(&mut xtvx, &mut xtvy, a_n, &xbar, &ybar, real::<T>(n as f64));
    }
    solve_normal_equations(design, xtvx, &xtvy)
}

fn solve_normal_equations<T: Real>(
    design: &StackedDesign<T>,
    xtvx: DMatrix<T>,
    xtvy: &DVector<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    match xtvx.clone().cholesky() {
        Some(chol) => Ok((chol.solve(xtvy), chol.inverse())),
        None => {
            let columns = design.collinear_columns();
            if columns.is_empty() {
                Err(ill_conditioned(&xtvx, "normal equations"))
            } else {
                Err(Error::RankDeficient { columns })
            }
        }
    }
}

/// Class mean design block (`M x p`) and response (`M`).
fn class_means<T: Real>(
    class: &crate::design::ClassBlock<T>,
    m: usize,
    p: usize,
) -> (DMatrix<T>, DVector<T>) {
    let n = class.n;
    let inv_n = T::one() / real::<T>(n as f64);
    let mut xbar = DMatrix::zeros(m, p);
    let mut ybar = DVector::zeros(m);
    for i in 0..n {
        for a in 0..m {
            ybar[a] += class.y[i * m + a];
            for q in 0..p {
                xbar[(a, q)] += class.x[(i * m + a, q)];
            }
        }
    }
    (xbar * inv_n, ybar * inv_n)
}

/// `xtvx += w * B' K B`, `xtvy += w * B' K d` for an `M x p` block `B`,
/// `M`-vector `d` and `M x M` kernel `K`.
fn accumulate_cross<T: Real>(
    xtvx: &mut DMatrix<T>,
    xtvy: &mut DVector<T>,
    kernel: &DMatrix<T>,
    block: &DMatrix<T>,
    d: &DVector<T>,
    weight: T,
) {
    let m = kernel.nrows();
    let p = block.ncols();
    for a in 0..m {
        for b in 0..m {
            let k = kernel[(a, b)] * weight;
            if k == T::zero() {
                continue;
            }
            for q in 0..p {
                let ba = block[(a, q)] * k;
                xtvy[q] += ba * d[b];
                for s in 0..p {
                    xtvx[(q, s)] += ba * block[(b, s)];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Aggregated sufficient statistics
// ---------------------------------------------------------------------------

/// Design aggregates that make likelihood evaluations independent of the
/// number of students. When the design carries one intercept per outcome,
/// responses are shifted by their per-outcome grand means before
/// aggregation; the shift is absorbed exactly by the intercepts and undone
/// on the returned coefficients.
///
/// With `C_i = X_i - Xbar_j` and `d_i = y_i - ybar_j` (centered within class):
///
/// - `g[a][b]   = sum_i C_i[a,:]' C_i[b,:]` (`p x p`)
/// - `sdc[a][b] = sum_i C_i[a,:]' d_i[b]`   (`p`)
/// - `sdd[a,b]  = sum_i d_i[a] d_i[b]`
///
/// and per distinct class size `n`:
///
/// - `hn[a][b] = sum_{j: n_j=n} n Xbar_j[a,:]' Xbar_j[b,:]`
/// - `un[a][b] = sum_{j: n_j=n} n Xbar_j[a,:]' ybar_j[b]`
/// - `sn[a,b]  = sum_{j: n_j=n} n ybar_j[a] ybar_j[b]`
pub struct DesignStats<T: Real> {
    pub m: usize,
    pub p: usize,
    pub n_students: usize,
    pub n_classes: usize,
    sdd: DMatrix<T>,
    sdc: Vec<DVector<T>>,
    g: Vec<DMatrix<T>>,
    sizes: BTreeMap<usize, SizeAgg<T>>,
    /// Per-outcome response shift absorbed by the intercept columns; keeps
    /// the between-class aggregates near the residual scale so the quadratic
    /// form does not cancel catastrophically at score-point magnitudes.
    shift: DVector<T>,
    intercept_cols: Option<Vec<usize>>,
}

struct SizeAgg<T: Real> {
    count: usize,
    hn: Vec<DMatrix<T>>,
    un: Vec<DVector<T>>,
    sn: DMatrix<T>,
}

/// Result of one profiled evaluation.
pub struct ProfiledEval<T: Real> {
    pub log_l: T,
    pub beta: DVector<T>,
}

impl<T: Real> DesignStats<T> {
    pub fn new(design: &StackedDesign<T>) -> Self {
        let (m, p) = (design.m, design.p);
        let mut sdd = DMatrix::zeros(m, m);
        let mut sdc = vec![DVector::zeros(p); m * m];
        let mut g = vec![DMatrix::zeros(p, p); m * m];
        let mut sizes: BTreeMap<usize, SizeAgg<T>> = BTreeMap::new();

        let intercept_cols = intercept_columns(design);
        let mut shift: DVector<T> = DVector::zeros(m);
        if intercept_cols.is_some() {
            let mut count = T::zero();
            for class in &design.classes {
                for i in 0..class.n {
                    for a in 0..m {
                        shift[a] += class.y[i * m + a];
                    }
                }
                count += real(class.n as f64);
            }
            shift /= count;
        }

        let mut cx = DMatrix::zeros(m, p);
        let mut cy = DVector::zeros(m);
        for class in &design.classes {
            let n = class.n;
            let (xbar, ybar_raw) = class_means(class, m, p);
            let ybar = &ybar_raw - &shift;
            for i in 0..n {
                for a in 0..m {
                    cy[a] = class.y[i * m + a] - ybar_raw[a];
                    for q in 0..p {
                        cx[(a, q)] = class.x[(i * m + a, q)] - xbar[(a, q)];
                    }
                }
                for a in 0..m {
                    for b in 0..m {
                        sdd[(a, b)] += cy[a] * cy[b];
                        let idx = a * m + b;
                        let sdc_ab = &mut sdc[idx];
                        let g_ab = &mut g[idx];
                        for q in 0..p {
                            let ca = cx[(a, q)];
                            if ca == T::zero() {
                                continue;
                            }
                            sdc_ab[q] += ca * cy[b];
                            for s in 0..p {
                                g_ab[(q, s)] += ca * cx[(b, s)];
                            }
                        }
                    }
                }
            }
            let agg = sizes.entry(n).or_insert_with(|| SizeAgg {
                count: 0,
                hn: vec![DMatrix::zeros(p, p); m * m],
                un: vec![DVector::zeros(p); m * m],
                sn: DMatrix::zeros(m, m),
            });
            agg.count += 1;
            let w = real::<T>(n as f64);
            for a in 0..m {
                for b in 0..m {
                    agg.sn[(a, b)] += w * ybar[a] * ybar[b];
                    let idx = a * m + b;
                    for q in 0..p {
                        let xa = xbar[(a, q)] * w;
                        if xa == T::zero() {
                            continue;
                        }
                        agg.un[idx][q] += xa * ybar[b];
                        for s in 0..p {
                            agg.hn[idx][(q, s)] += xa * xbar[(b, s)];
                        }
                    }
                }
            }
        }
        DesignStats {
            m,
            p,
            n_students: design.n_students(),
            n_classes: design.n_classes(),
            sdd,
            sdc,
            g,
            sizes,
            shift,
            intercept_cols,
        }
    }

    /// Maps coefficients of the shifted problem back to the original scale.
    fn unshift(&self, mut beta: DVector<T>) -> DVector<T> {
        if let Some(cols) = &self.intercept_cols {
            for (a, &col) in cols.iter().enumerate() {
                beta[col] += self.shift[a];
            }
        }
        beta
    }

    fn context(&self, c: &CovarianceParams<T>) -> Result<CovContext<T>> {
        CovContext::new(c, self.sizes.keys().copied())
    }

    /// Normal equations `(X'V^{-1}X, X'V^{-1}y, y'V^{-1}y)` from the
    /// aggregates.
    fn normal_equations(&self, ctx: &CovContext<T>) -> (DMatrix<T>, DVector<T>, T) {
        let (m, p) = (self.m, self.p);
        let mut xtvx: DMatrix<T> = DMatrix::zeros(p, p);
        let mut xtvy: DVector<T> = DVector::zeros(p);
        let mut ytvy = T::zero();
        for a in 0..m {
            for b in 0..m {
                let idx = a * m + b;
                let k = ctx.sigma_inv[(a, b)];
                mat_axpy(&mut xtvx, k, &self.g[idx]);
                vec_axpy(&mut xtvy, k, &self.sdc[idx]);
                ytvy += k * self.sdd[(a, b)];
                for (n, agg) in &self.sizes {
                    let an = ctx.per_size[n].a[(a, b)];
                    mat_axpy(&mut xtvx, an, &agg.hn[idx]);
                    vec_axpy(&mut xtvy, an, &agg.un[idx]);
                    ytvy += an * agg.sn[(a, b)];
                }
            }
        }
        (xtvx, xtvy, ytvy)
    }

    fn logdet_total(&self, ctx: &CovContext<T>) -> T {
        let mut total =
            real::<T>((self.n_students - self.n_classes) as f64) * ctx.logdet_sigma;
        for (n, agg) in &self.sizes {
            total += real::<T>(agg.count as f64) * ctx.per_size[n].logdet_w;
        }
        total
    }

    /// Profiled log-likelihood: GLS coefficients at `(Sigma, T)` and the
    /// likelihood evaluated there.
    pub fn profiled(&self, c: &CovarianceParams<T>) -> Result<ProfiledEval<T>> {
        let ctx = self.context(c)?;
        let (xtvx, xtvy, ytvy) = self.normal_equations(&ctx);
        let chol = xtvx
            .clone()
            .cholesky()
            .ok_or_else(|| ill_conditioned(&xtvx, "normal equations"))?;
        let beta = chol.solve(&xtvy);
        let log_l = self.log_l_at(&ctx, &xtvx, &xtvy, ytvy, &beta);
        Ok(ProfiledEval { log_l, beta: self.unshift(beta) })
    }

    fn log_l_at(
        &self,
        ctx: &CovContext<T>,
        xtvx: &DMatrix<T>,
        xtvy: &DVector<T>,
        ytvy: T,
        beta: &DVector<T>,
    ) -> T {
        let q = ytvy - real::<T>(2.0) * beta.dot(xtvy) + beta.dot(&(xtvx * beta));
        let dim = real::<T>((self.n_students * self.m) as f64);
        let two_pi_ln = real::<T>(std::f64::consts::TAU).ln();
        real::<T>(-0.5) * (dim * two_pi_ln + self.logdet_total(ctx) + q)
    }

    /// Within-class residual scatter `sum_j sum_i (d - C beta)(d - C beta)'`.
    fn swr(&self, beta: &DVector<T>) -> DMatrix<T> {
        let m = self.m;
        let mut out = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                out[(a, b)] = self.sdd[(a, b)] - beta.dot(&self.sdc[b * m + a])
                    - beta.dot(&self.sdc[a * m + b])
                    + beta.dot(&(&self.g[a * m + b] * beta));
            }
        }
        out
    }

    /// `sum_{j: n_j=n} n rbar_j rbar_j'` at the given coefficients.
    fn rn(&self, agg: &SizeAgg<T>, beta: &DVector<T>) -> DMatrix<T> {
        let m = self.m;
        let mut out = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                out[(a, b)] = agg.sn[(a, b)] - beta.dot(&agg.un[b * m + a])
                    - beta.dot(&agg.un[a * m + b])
                    + beta.dot(&(&agg.hn[a * m + b] * beta));
            }
        }
        out
    }

    /// Profiled log-likelihood and its analytic gradient in the unconstrained
    /// (log-Cholesky) coordinates. The gradient of the profiled objective
    /// equals the partial gradient at the GLS coefficients because the
    /// coefficient gradient vanishes there.
    pub fn profiled_grad(&self, c: &CovarianceParams<T>) -> Result<(ProfiledEval<T>, DVector<T>)> {
        let ctx = self.context(c)?;
        let (xtvx, xtvy, ytvy) = self.normal_equations(&ctx);
        let chol = xtvx
            .clone()
            .cholesky()
            .ok_or_else(|| ill_conditioned(&xtvx, "normal equations"))?;
        let beta = chol.solve(&xtvy);
        let log_l = self.log_l_at(&ctx, &xtvx, &xtvy, ytvy, &beta);

        let m = self.m;
        let half = real::<T>(0.5);
        let swr = self.swr(&beta);
        // d l / d Sigma as a symmetric full-matrix gradient.
        let mut g_sigma = &ctx.sigma_inv
            * real::<T>((self.n_students - self.n_classes) as f64)
            - &ctx.sigma_inv * &swr * &ctx.sigma_inv;
        let mut g_tau = DMatrix::zeros(m, m);
        for (n, agg) in &self.sizes {
            let a_n = &ctx.per_size[n].a;
            let rn = self.rn(agg, &beta);
            let a_rn_a = a_n * &rn * a_n;
            let count = real::<T>(agg.count as f64);
            let nn = real::<T>(*n as f64);
            g_sigma += a_n * count - &a_rn_a;
            g_tau += (a_n * count - &a_rn_a) * nn;
        }
        g_sigma *= -half;
        g_tau *= -half;

        let grad = chain_to_unconstrained(c, &g_sigma, &g_tau)?;
        Ok((ProfiledEval { log_l, beta: self.unshift(beta) }, grad))
    }
}

/// Per-outcome intercept columns when the design carries a full set: column
/// `c` qualifies for outcome `a` when it is the indicator of outcome `a`'s
/// rows.
fn intercept_columns<T: Real>(design: &StackedDesign<T>) -> Option<Vec<usize>> {
    let m = design.m;
    let mut cols = Vec::with_capacity(m);
    for a in 0..m {
        let col = design
            .coef
            .iter()
            .position(|c| c.term == "intercept" && c.outcome == Some(a))?;
        cols.push(col);
    }
    // Verify the indicator pattern on the first class.
    let class = design.classes.first()?;
    for i in 0..class.n {
        for r in 0..m {
            for (a, &col) in cols.iter().enumerate() {
                let expect = if r == a { T::one() } else { T::zero() };
                if class.x[(i * m + r, col)] != expect {
                    return None;
                }
            }
        }
    }
    Some(cols)
}

fn mat_axpy<T: Real>(acc: &mut DMatrix<T>, s: T, x: &DMatrix<T>) {
    if s == T::zero() {
        return;
    }
    acc.iter_mut().zip(x.iter()).for_each(|(a, &v)| *a += s * v);
}

fn vec_axpy<T: Real>(acc: &mut DVector<T>, s: T, x: &DVector<T>) {
    if s == T::zero() {
        return;
    }
    acc.iter_mut().zip(x.iter()).for_each(|(a, &v)| *a += s * v);
}

/// Chains symmetric matrix gradients through the log-Cholesky map.
///
/// For `Sigma = L L'` and `dl = <G, dSigma>` with `G` symmetric, the factor
/// gradient is `2 G L` on the lower triangle, with diagonal entries further
/// scaled by `L_ii` for the log-diagonal coordinates.
fn chain_to_unconstrained<T: Real>(
    c: &CovarianceParams<T>,
    g_sigma: &DMatrix<T>,
    g_tau: &DMatrix<T>,
) -> Result<DVector<T>> {
    let m = c.dim();
    let idx = lower_triangle_indices(m);
    let mut grad = DVector::zeros(2 * idx.len());
    let two = real::<T>(2.0);
    for (which, g_mat) in [(0usize, g_sigma), (1usize, g_tau)] {
        let mat = if which == 0 { &c.sigma } else { &c.tau };
        let l = CovarianceParams::chol_lower(mat)?;
        let gl = g_mat * &l * two;
        let offset = which * idx.len();
        for (k, &(i, j)) in idx.iter().enumerate() {
            grad[offset + k] = if i == j { gl[(i, j)] * l[(i, i)] } else { gl[(i, j)] };
        }
    }
    Ok(grad)
}

/// How to compute the gradient of the profiled likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientMethod {
    /// Exact analytic gradient (default).
    Analytic,
    /// Central finite differences with step `rel_step * (1 + |theta_k|)`.
    CentralFd { rel_step: f64 },
    /// Analytic gradient, cross-checked against central differences; errors
    /// if any coordinate disagrees beyond `tol` relative.
    Checked { rel_step: f64, tol: f64 },
}

impl GradientMethod {
    pub fn central_default<T: Real>() -> Self {
        GradientMethod::CentralFd { rel_step: crate::scalar::as_f64(T::default_epsilon().cbrt()) }
    }
}

impl Default for GradientMethod {
    fn default() -> Self {
        GradientMethod::Analytic
    }
}

/// Profiled log-likelihood at unconstrained coordinates.
pub fn profiled_loglik<T: Real>(theta: &DVector<T>, stats: &DesignStats<T>) -> Result<T> {
    let c = CovarianceParams::from_unconstrained(theta, stats.m)?;
    Ok(stats.profiled(&c)?.log_l)
}

/// Gradient of the beta-profiled log-likelihood in the unconstrained
/// parameterization.
pub fn grad_loglik<T: Real>(
    theta: &DVector<T>,
    stats: &DesignStats<T>,
    method: GradientMethod,
) -> Result<DVector<T>> {
    let grad = match method {
        GradientMethod::Analytic => {
            let c = CovarianceParams::from_unconstrained(theta, stats.m)?;
            stats.profiled_grad(&c)?.1
        }
        GradientMethod::CentralFd { rel_step } => fd_grad(theta, stats, rel_step)?,
        GradientMethod::Checked { rel_step, tol } => {
            let c = CovarianceParams::from_unconstrained(theta, stats.m)?;
            let analytic = stats.profiled_grad(&c)?.1;
            let fd = fd_grad(theta, stats, rel_step)?;
            for k in 0..analytic.len() {
                let denom = real::<T>(1.0).max(fd[k].abs());
                if (analytic[k] - fd[k]).abs() > real::<T>(tol) * denom {
                    return Err(Error::Validation(format!(
                        "gradient self-check failed at coordinate {k}: analytic {:.6e}, central difference {:.6e}",
                        crate::scalar::as_f64(analytic[k]),
                        crate::scalar::as_f64(fd[k]),
                    )));
                }
            }
            analytic
        }
    };
    for k in 0..grad.len() {
        if !grad[k].is_finite() {
            return Err(Error::NonFiniteGradient { coordinate: k });
        }
    }
    Ok(grad)
}

fn fd_grad<T: Real>(theta: &DVector<T>, stats: &DesignStats<T>, rel_step: f64) -> Result<DVector<T>> {
    let mut grad = DVector::zeros(theta.len());
    let mut work = theta.clone();
    for k in 0..theta.len() {
        let h = real::<T>(rel_step) * (T::one() + theta[k].abs());
        work[k] = theta[k] + h;
        let up = profiled_loglik(&work, stats)?;
        work[k] = theta[k] - h;
        let down = profiled_loglik(&work, stats)?;
        work[k] = theta[k];
        grad[k] = (up - down) / (real::<T>(2.0) * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense;
    use crate::testutil::{random_cov, random_design, rng};
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn scalar_marginal_block_formula() {
        // M = 1: log|V| = log(sigma^2 + n tau^2) + (n-1) log sigma^2.
        let c = CovarianceParams::new(dmatrix![1.0], dmatrix![1.0]).unwrap();
        let (a, logdet) = marginal_blocks(&c, 4).unwrap();
        assert_relative_eq!(a[(0, 0)], 1.0 / 5.0, epsilon = 1e-12);
        assert_relative_eq!(logdet, 5.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn independence_limit_logdet_vanishes() {
        let tiny = 1e-10;
        let c = CovarianceParams::new(
            nalgebra::DMatrix::<f64>::identity(3, 3),
            nalgebra::DMatrix::identity(3, 3) * tiny,
        )
        .unwrap();
        let (_, logdet) = marginal_blocks(&c, 5).unwrap();
        assert!(logdet.abs() < 1e-8, "logdet = {logdet}");
    }

    #[test]
    fn marginal_blocks_match_dense_assembly() {
        let mut r = rng(42);
        for _ in 0..20 {
            let c = random_cov(&mut r, 3);
            let (a, logdet) = marginal_blocks(&c, 3).unwrap();
            let v = dense::marginal_covariance(&c, 3);
            let chol = v.clone().cholesky().unwrap();
            let dense_logdet: f64 =
                2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            assert_relative_eq!(logdet, dense_logdet, max_relative = 1e-8);
            // A = (Sigma + n T)^{-1}.
            let w = &c.sigma + &c.tau * 3.0;
            let prod = &a * w;
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert_relative_eq!(prod[(i, j)], expect, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_observation_loglik() {
        let c = CovarianceParams::new(dmatrix![1.0], dmatrix![1e-14]).unwrap();
        let design = crate::design::StackedDesign {
            m: 1,
            p: 1,
            outcomes: vec!["y".into()],
            coef: vec![crate::design::CoefInfo {
                name: "y:intercept".into(),
                term: "intercept".into(),
                outcome: Some(0),
            }],
            classes: vec![crate::design::ClassBlock {
                class_id: "c0".into(),
                school_id: "s0".into(),
                student_ids: vec!["st0".into()],
                n: 1,
                y: nalgebra::dvector![0.0],
                x: dmatrix![1.0],
            }],
        };
        let beta = nalgebra::dvector![0.0];
        let value = log_likelihood(&c, &beta, &design).unwrap();
        assert_relative_eq!(
            value.log_l,
            -0.5 * std::f64::consts::TAU.ln(),
            epsilon = 1e-10
        );
        assert_eq!(value.per_class.len(), 1);
    }

    #[test]
    fn loglik_matches_dense_on_seeded_instances() {
        let mut r = rng(7);
        for _ in 0..10 {
            let c = random_cov(&mut r, 3);
            let design = random_design(&mut r, 3, 1, &[2, 3, 3, 2], &c);
            let beta = nalgebra::DVector::from_fn(design.p, |i, _| 0.1 * i as f64 - 0.2);
            let fast = log_likelihood(&c, &beta, &design).unwrap();
            let slow = dense::log_likelihood(&c, &beta, &design).unwrap();
            assert_relative_eq!(fast.log_l, slow, max_relative = 1e-8);
            let sum = crate::scalar::pairwise_sum(&fast.per_class);
            assert_relative_eq!(fast.log_l, sum, epsilon = 1e-12);
        }
    }

    #[test]
    fn loglik_invariant_to_permutations() {
        let mut r = rng(9);
        let c = random_cov(&mut r, 2);
        let design = random_design(&mut r, 2, 1, &[3, 4], &c);
        let beta = nalgebra::DVector::from_element(design.p, 0.05);
        let base = log_likelihood(&c, &beta, &design).unwrap().log_l;

        // Permute students within class 0 (student-major blocks of size M).
        let mut permuted = design.clone();
        {
            let class = &mut permuted.classes[0];
            let m = permuted.m;
            let y = class.y.clone();
            let x = class.x.clone();
            let order = [2usize, 0, 1];
            for (dst, &src) in order.iter().enumerate() {
                for a in 0..m {
                    class.y[dst * m + a] = y[src * m + a];
                    for q in 0..permuted.p {
                        class.x[(dst * m + a, q)] = x[(src * m + a, q)];
                    }
                }
            }
        }
        permuted.classes.swap(0, 1);
        let after = log_likelihood(&c, &beta, &permuted).unwrap().log_l;
        assert_relative_eq!(base, after, epsilon = 1e-10);
    }

    #[test]
    fn gls_intercept_only_is_sample_mean() {
        let c = CovarianceParams::new(dmatrix![2.0], dmatrix![1e-12]).unwrap();
        let mut r = rng(3);
        let design = random_design(&mut r, 1, 0, &[4, 4], &c);
        let (beta, _) = profile_beta_gls(&c, &design).unwrap();
        let all: Vec<f64> = design.classes.iter().flat_map(|b| b.y.iter().copied()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert_relative_eq!(beta[0], mean, epsilon = 1e-8);
    }

    #[test]
    fn gls_matches_dense_on_seeded_instances() {
        let mut r = rng(21);
        for _ in 0..10 {
            let c = random_cov(&mut r, 3);
            let design = random_design(&mut r, 3, 2, &[2, 4, 3], &c);
            let (beta, cov) = profile_beta_gls(&c, &design).unwrap();
            let (beta_d, cov_d) = dense::gls(&c, &design).unwrap();
            for i in 0..design.p {
                assert_relative_eq!(beta[i], beta_d[i], max_relative = 1e-8, epsilon = 1e-10);
                for j in 0..design.p {
                    assert_relative_eq!(cov[(i, j)], cov_d[(i, j)], max_relative = 1e-7, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn gls_diagonal_equal_outcomes_reduce_to_univariate() {
        // Diagonal Sigma and T with equal variances and identical per-outcome
        // designs: the multivariate GLS must coincide with three separate
        // univariate fits.
        let mut r = rng(33);
        let c = CovarianceParams::new(
            nalgebra::DMatrix::identity(3, 3) * 2.5,
            nalgebra::DMatrix::identity(3, 3) * 0.7,
        )
        .unwrap();
        let design = random_design(&mut r, 3, 1, &[3, 5, 4, 2], &c);
        let (beta, _) = profile_beta_gls(&c, &design).unwrap();

        for k in 0..3 {
            // Univariate design for outcome k: columns intercept + x0.
            let uni_c = CovarianceParams::new(dmatrix![2.5], dmatrix![0.7]).unwrap();
            let classes: Vec<crate::design::ClassBlock<f64>> = design
                .classes
                .iter()
                .map(|b| {
                    let n = b.n;
                    let mut y = nalgebra::DVector::zeros(n);
                    let mut x = nalgebra::DMatrix::zeros(n, 2);
                    for i in 0..n {
                        y[i] = b.y[i * 3 + k];
                        x[(i, 0)] = 1.0;
                        x[(i, 1)] = b.x[(i * 3 + k, 3 + k)];
                    }
                    crate::design::ClassBlock {
                        class_id: b.class_id.clone(),
                        school_id: b.school_id.clone(),
                        student_ids: b.student_ids.clone(),
                        n,
                        y,
                        x,
                    }
                })
                .collect();
            let uni = crate::design::StackedDesign {
                m: 1,
                p: 2,
                outcomes: vec![format!("o{k}")],
                coef: vec![
                    crate::design::CoefInfo {
                        name: "i".into(),
                        term: "intercept".into(),
                        outcome: Some(0),
                    },
                    crate::design::CoefInfo { name: "x".into(), term: "x0".into(), outcome: Some(0) },
                ],
                classes,
            };
            let (beta_uni, _) = profile_beta_gls(&uni_c, &uni).unwrap();
            assert_relative_eq!(beta[k], beta_uni[0], max_relative = 1e-8, epsilon = 1e-10);
            assert_relative_eq!(beta[3 + k], beta_uni[1], max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn stats_path_agrees_with_direct_path() {
        let mut r = rng(55);
        for _ in 0..5 {
            let c = random_cov(&mut r, 3);
            let design = random_design(&mut r, 3, 2, &[1, 3, 4, 2, 3], &c);
            let stats = DesignStats::new(&design);
            let eval = stats.profiled(&c).unwrap();
            let (beta_direct, _) = profile_beta_gls(&c, &design).unwrap();
            for i in 0..design.p {
                assert_relative_eq!(eval.beta[i], beta_direct[i], max_relative = 1e-9, epsilon = 1e-11);
            }
            let direct = log_likelihood(&c, &eval.beta, &design).unwrap().log_l;
            assert_relative_eq!(eval.log_l, direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut r = rng(77);
        let c0 = random_cov(&mut r, 3);
        let design = random_design(&mut r, 3, 1, &[3, 4, 2, 5, 3, 4], &c0);
        let stats = DesignStats::new(&design);
        for _ in 0..5 {
            let theta = nalgebra::DVector::from_fn(12, |_, _| {
                use rand::Rng as _;
                1.5 * (r.random::<f64>() - 0.3)
            });
            let analytic = grad_loglik(&theta, &stats, GradientMethod::Analytic).unwrap();
            let fd = grad_loglik(&theta, &stats, GradientMethod::CentralFd { rel_step: 1e-5 })
                .unwrap();
            for k in 0..12 {
                let denom = fd[k].abs().max(1.0);
                assert!(
                    (analytic[k] - fd[k]).abs() / denom < 1e-5,
                    "coordinate {k}: analytic {} vs fd {}",
                    analytic[k],
                    fd[k]
                );
            }
        }
    }

    #[test]
    fn univariate_gradient_matches_hand_formula() {
        // M = 1, single class size n: with sigma^2 = e^{2s}, tau^2 = e^{2t},
        // l = -1/2 [ (N-J) log sigma^2 + J log(sigma^2 + n tau^2)
        //            + Swr/sigma^2 + sum_j n rbar_j^2 / (sigma^2 + n tau^2) ] + const
        // dl/ds = -(N-J) + Swr/sigma^2 - J n... derived below directly.
        let mut r = rng(101);
        let c = CovarianceParams::new(dmatrix![1.3], dmatrix![0.4]).unwrap();
        let design = random_design(&mut r, 1, 0, &[4, 4, 4], &c);
        let stats = DesignStats::new(&design);
        let theta = c.to_unconstrained();
        let grad = grad_loglik(&theta, &stats, GradientMethod::Analytic).unwrap();

        let sigma2 = c.sigma[(0, 0)];
        let tau2 = c.tau[(0, 0)];
        let n = 4.0;
        let j = 3.0;
        let big_n = 12.0;
        let eval = stats.profiled(&c).unwrap();
        let beta = eval.beta[0];
        // Hand-computed sums.
        let mut swr = 0.0;
        let mut rbar2 = 0.0;
        for class in &design.classes {
            let resid: Vec<f64> = class.y.iter().map(|&y| y - beta).collect();
            let rbar: f64 = resid.iter().sum::<f64>() / n;
            rbar2 += n * rbar * rbar;
            swr += resid.iter().map(|v| (v - rbar).powi(2)).sum::<f64>();
        }
        let w = sigma2 + n * tau2;
        // d l / d sigma2 and d l / d tau2 (full-matrix derivatives).
        let dl_dsigma2 = -0.5 * ((big_n - j) / sigma2 + j / w - swr / (sigma2 * sigma2)
            - rbar2 / (w * w));
        let dl_dtau2 = -0.5 * (j * n / w - n * rbar2 / (w * w));
        // Chain through the log-Cholesky coordinate: sigma2 = exp(2 s).
        let expect_s = dl_dsigma2 * 2.0 * sigma2;
        let expect_t = dl_dtau2 * 2.0 * tau2;
        assert_relative_eq!(grad[0], expect_s, max_relative = 1e-8);
        assert_relative_eq!(grad[1], expect_t, max_relative = 1e-8);
    }

    #[test]
    fn location_shift_preserves_profiled_likelihood() {
        let mut r = rng(13);
        let c = random_cov(&mut r, 2);
        let design = random_design(&mut r, 2, 1, &[3, 4, 3], &c);
        let stats = DesignStats::new(&design);
        let eval = stats.profiled(&c).unwrap();

        let mut shifted = design.clone();
        for class in &mut shifted.classes {
            for v in class.y.iter_mut() {
                *v += 10.0;
            }
        }
        let stats2 = DesignStats::new(&shifted);
        let eval2 = stats2.profiled(&c).unwrap();
        assert_relative_eq!(eval.log_l, eval2.log_l, max_relative = 1e-10);
        // Intercepts absorb the shift.
        assert_relative_eq!(eval.beta[0] + 10.0, eval2.beta[0], max_relative = 1e-8);
    }

    #[test]
    fn degenerate_single_student_class_supported() {
        let mut r = rng(17);
        let c = random_cov(&mut r, 2);
        let design = random_design(&mut r, 2, 0, &[1, 3], &c);
        let beta = nalgebra::DVector::zeros(design.p);
        let fast = log_likelihood(&c, &beta, &design).unwrap();
        let slow = dense::log_likelihood(&c, &beta, &design).unwrap();
        assert_relative_eq!(fast.log_l, slow, max_relative = 1e-10);
    }

    #[test]
    fn nonfinite_gradient_reports_coordinate() {
        let mut r = rng(19);
        let c = random_cov(&mut r, 1);
        let design = random_design(&mut r, 1, 0, &[2, 2], &c);
        let stats = DesignStats::new(&design);
        // Huge log-diagonal overflows exp, producing a non-finite likelihood.
        let theta = nalgebra::dvector![800.0, 0.0];
        let err = grad_loglik(&theta, &stats, GradientMethod::Analytic).unwrap_err();
        assert!(
            matches!(err, Error::NonFiniteGradient { .. } | Error::IllConditioned { .. }),
            "{err:?}"
        );
    }
}
