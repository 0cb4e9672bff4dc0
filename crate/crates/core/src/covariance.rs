//! Covariance parameters and their unconstrained parameterization.
//!
//! The pair `(Sigma, T)` of within-class and between-class covariance
//! matrices is optimized through log-Cholesky coordinates: each matrix is
//! represented by the lower triangle of its Cholesky factor, row-major, with
//! the diagonal stored on the log scale. The map is a bijection between
//! `R^{M(M+1)}` and pairs of symmetric positive definite matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Within-class (`sigma`) and between-class (`tau`) covariance matrices,
/// both `M x M`, in squared score points.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceParams<T: Real> {
    pub sigma: DMatrix<T>,
    pub tau: DMatrix<T>,
}

impl<T: Real> CovarianceParams<T> {
    /// Validates symmetry and positive definiteness of both matrices.
    pub fn new(sigma: DMatrix<T>, tau: DMatrix<T>) -> Result<Self> {
        check_spd(&sigma, "sigma")?;
        check_spd(&tau, "tau")?;
        if sigma.nrows() != tau.nrows() {
            return Err(Error::Validation(format!(
                "sigma is {}x{} but tau is {}x{}",
                sigma.nrows(),
                sigma.ncols(),
                tau.nrows(),
                tau.ncols()
            )));
        }
        Ok(Self { sigma, tau })
    }

    /// Number of outcomes `M`.
    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// Length of the unconstrained vector for `m` outcomes: `m (m + 1)`.
    pub fn n_unconstrained(m: usize) -> usize {
        m * (m + 1)
    }

    /// Packs `(Sigma, T)` into log-Cholesky coordinates.
    pub fn to_unconstrained(&self) -> DVector<T> {
        let m = self.dim();
        let half = m * (m + 1) / 2;
        let mut theta = DVector::zeros(2 * half);
        pack_log_chol(&self.sigma, theta.as_mut_slice(), 0);
        pack_log_chol(&self.tau, theta.as_mut_slice(), half);
        theta
    }

    /// Rebuilds `(Sigma, T)` from log-Cholesky coordinates.
    ///
    /// The result is positive definite by construction for any finite input.
    pub fn from_unconstrained(theta: &DVector<T>, m: usize) -> Result<Self> {
        let half = m * (m + 1) / 2;
        if theta.len() != 2 * half {
            return Err(Error::Validation(format!(
                "expected {} covariance parameters for M={}, got {}",
                2 * half,
                m,
                theta.len()
            )));
        }
        let sigma = unpack_log_chol(theta.as_slice(), 0, m);
        let tau = unpack_log_chol(theta.as_slice(), half, m);
        Ok(Self { sigma, tau })
    }

    /// Lower Cholesky factor of a matrix already known to be SPD.
    pub(crate) fn chol_lower(mat: &DMatrix<T>) -> Result<DMatrix<T>> {
        mat.clone()
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| ill_conditioned(mat, "cholesky"))
    }
}

fn check_spd<T: Real>(mat: &DMatrix<T>, name: &str) -> Result<()> {
    if mat.nrows() != mat.ncols() {
        return Err(Error::Validation(format!(
            "{name} must be square, got {}x{}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    let tol = T::default_epsilon() * crate::real::<T>(1e6);
    for i in 0..mat.nrows() {
        for j in 0..i {
            let scale = T::one() + mat[(i, i)].abs() + mat[(j, j)].abs();
            if (mat[(i, j)] - mat[(j, i)]).abs() > tol * scale {
                return Err(Error::Validation(format!("{name} is not symmetric")));
            }
        }
    }
    if mat.clone().cholesky().is_none() {
        return Err(ill_conditioned(mat, name));
    }
    Ok(())
}

pub(crate) fn ill_conditioned<T: Real>(mat: &DMatrix<T>, context: &str) -> Error {
    let eig = mat.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(f64::MIN, |a, &v| a.max(crate::scalar::as_f64(v).abs()));
    let min = eig.iter().fold(f64::MAX, |a, &v| a.min(crate::scalar::as_f64(v).abs()));
    Error::IllConditioned {
        context: context.to_string(),
        condition: if min > 0.0 { max / min } else { f64::INFINITY },
    }
}

fn pack_log_chol<T: Real>(mat: &DMatrix<T>, out: &mut [T], offset: usize) {
    let l = mat
        .clone()
        .cholesky()
        .expect("pack_log_chol requires an SPD matrix")
        .l();
    let mut k = offset;
    for i in 0..mat.nrows() {
        for j in 0..=i {
            out[k] = if i == j { l[(i, j)].ln() } else { l[(i, j)] };
            k += 1;
        }
    }
}

fn unpack_log_chol<T: Real>(theta: &[T], offset: usize, m: usize) -> DMatrix<T> {
    let mut l = DMatrix::zeros(m, m);
    let mut k = offset;
    for i in 0..m {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[k].exp() } else { theta[k] };
            k += 1;
        }
    }
    &l * l.transpose()
}

/// Lower-triangular (row, col) index pairs in the packing order.
pub fn lower_triangle_indices(m: usize) -> Vec<(usize, usize)> {
    let mut idx = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in 0..=i {
            idx.push((i, j));
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    pub fn random_spd(rng: &mut ChaCha12Rng, m: usize, scale: f64) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                l[(i, j)] = if i == j {
                    scale * (0.5 + rng.random::<f64>())
                } else {
                    scale * (rng.random::<f64>() - 0.5)
                };
            }
        }
        &l * l.transpose()
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for m in 1..=3 {
            for _ in 0..20 {
                let c = CovarianceParams::new(
                    random_spd(&mut rng, m, 10.0),
                    random_spd(&mut rng, m, 5.0),
                )
                .unwrap();
                let theta = c.to_unconstrained();
                let back = CovarianceParams::from_unconstrained(&theta, m).unwrap();
                let theta2 = back.to_unconstrained();
                for k in 0..theta.len() {
                    assert!(
                        (theta[k] - theta2[k]).abs() <= 1e-12 * (1.0 + theta[k].abs()),
                        "coordinate {k} not recovered"
                    );
                }
                for i in 0..m {
                    for j in 0..m {
                        let d = (c.sigma[(i, j)] - back.sigma[(i, j)]).abs();
                        assert!(d <= 1e-12 * (1.0 + c.sigma[(i, j)].abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn reconstruction_is_positive_definite() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let theta = DVector::from_fn(12, |_, _| 4.0 * (rng.random::<f64>() - 0.5));
            let c = CovarianceParams::<f64>::from_unconstrained(&theta, 3).unwrap();
            assert!(c.sigma.clone().cholesky().is_some());
            assert!(c.tau.clone().cholesky().is_some());
        }
    }

    #[test]
    fn rejects_asymmetric_input() {
        let mut bad = DMatrix::identity(2, 2);
        bad[(0, 1)] = 0.5;
        let err = CovarianceParams::new(bad, DMatrix::identity(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let err =
            CovarianceParams::<f64>::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3))
                .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
