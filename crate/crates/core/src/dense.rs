//! Dense reference implementations.
//!
//! These assemble the full per-class marginal covariance
//! `V_j = I_n (x) Sigma + J_n (x) T` explicitly and work with generic dense
//! factorizations. They are quadratic-to-cubic in the class size and exist to
//! validate the closed-form kernels in [`crate::likelihood`] and
//! [`crate::eb`] on small problems; production code paths never assemble
//! `V_j`.

use nalgebra::{DMatrix, DVector};

use crate::covariance::CovarianceParams;
use crate::design::StackedDesign;
use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Assembles `V_j` for a class of size `n` in student-major order.
pub fn marginal_covariance<T: Real>(c: &CovarianceParams<T>, n: usize) -> DMatrix<T> {
    let m = c.dim();
    let mut v = DMatrix::zeros(m * n, m * n);
    for i in 0..n {
        for k in 0..n {
            for a in 0..m {
                for b in 0..m {
                    let mut val = c.tau[(a, b)];
                    if i == k {
                        val += c.sigma[(a, b)];
                    }
                    v[(i * m + a, k * m + b)] = val;
                }
            }
        }
    }
    v
}

fn chol_logdet<T: Real>(v: DMatrix<T>) -> Result<(nalgebra::Cholesky<T, nalgebra::Dyn>, T)> {
    let chol = v.cholesky().ok_or_else(|| Error::IllConditioned {
        context: "dense marginal covariance".into(),
        condition: f64::INFINITY,
    })?;
    let two = real::<T>(2.0);
    let logdet = chol.l().diagonal().iter().map(|d| d.ln()).fold(T::zero(), |a, b| a + b) * two;
    Ok((chol, logdet))
}

/// Exact marginal log-likelihood from dense per-class factorizations.
pub fn log_likelihood<T: Real>(
    c: &CovarianceParams<T>,
    beta: &DVector<T>,
    design: &StackedDesign<T>,
) -> Result<T> {
    let two_pi = real::<T>(std::f64::consts::TAU);
    let mut total = T::zero();
    for class in &design.classes {
        let v = marginal_covariance(c, class.n);
        let (chol, logdet) = chol_logdet(v)?;
        let r = &class.y - &class.x * beta;
        let vinv_r = chol.solve(&r);
        let q = r.dot(&vinv_r);
        let dim = real::<T>((class.n * design.m) as f64);
        total += real::<T>(-0.5) * (dim * two_pi.ln() + logdet + q);
    }
    Ok(total)
}

/// GLS fixed effects and model-based coefficient covariance from dense solves.
pub fn gls<T: Real>(
    c: &CovarianceParams<T>,
    design: &StackedDesign<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let p = design.p;
    let mut xtvx = DMatrix::zeros(p, p);
    let mut xtvy = DVector::zeros(p);
    for class in &design.classes {
        let v = marginal_covariance(c, class.n);
        let (chol, _) = chol_logdet(v)?;
        let vinv_x = chol.solve(&class.x);
        xtvx += class.x.transpose() * &vinv_x;
        xtvy += vinv_x.transpose() * &class.y;
    }
    let chol = xtvx.cholesky().ok_or_else(|| Error::IllConditioned {
        context: "dense normal equations".into(),
        condition: f64::INFINITY,
    })?;
    let beta = chol.solve(&xtvy);
    Ok((beta, chol.inverse()))
}

/// Empirical Bayes class-effect predictions `T Z' V^{-1} (y - X beta)` from
/// the dense formula, one `M`-vector per class.
pub fn eb_predictions<T: Real>(
    c: &CovarianceParams<T>,
    beta: &DVector<T>,
    design: &StackedDesign<T>,
) -> Result<Vec<DVector<T>>> {
    let m = design.m;
    let mut out = Vec::with_capacity(design.n_classes());
    for class in &design.classes {
        let v = marginal_covariance(c, class.n);
        let (chol, _) = chol_logdet(v)?;
        let r = &class.y - &class.x * beta;
        let vinv_r = chol.solve(&r);
        // Z_j = 1_n (x) I_M, so Z' V^{-1} r sums the student blocks.
        let mut z_sum = DVector::zeros(m);
        for i in 0..class.n {
            for a in 0..m {
                z_sum[a] += vinv_r[i * m + a];
            }
        }
        out.push(&c.tau * z_sum);
    }
    Ok(out)
}
