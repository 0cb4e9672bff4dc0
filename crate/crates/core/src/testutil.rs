//! Shared helpers for unit tests: seeded random covariances, designs, and
//! model-generated responses.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covariance::CovarianceParams;
use crate::design::{ClassBlock, CoefInfo, StackedDesign};

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn std_normal(rng: &mut ChaCha12Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random SPD matrix `L L'` with diagonal bounded away from zero.
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

pub fn random_cov(rng: &mut ChaCha12Rng, m: usize) -> CovarianceParams<f64> {
    CovarianceParams::new(random_spd(rng, m, 2.0), random_spd(rng, m, 1.0)).unwrap()
}

/// Random stacked design: per-outcome intercepts plus `extra` per-outcome
/// covariate columns with N(0,1) values, responses drawn from the model at
/// `beta = 0` plus random effects, so the data carry the intended covariance
/// structure.
pub fn random_design(
    rng: &mut ChaCha12Rng,
    m: usize,
    extra: usize,
    sizes: &[usize],
    cov: &CovarianceParams<f64>,
) -> StackedDesign<f64> {
    let p = m + extra * m;
    let mut coef = Vec::new();
    for k in 0..m {
        coef.push(CoefInfo {
            name: format!("o{k}:intercept"),
            term: "intercept".into(),
            outcome: Some(k),
        });
    }
    for t in 0..extra {
        for k in 0..m {
            coef.push(CoefInfo { name: format!("o{k}:x{t}"), term: format!("x{t}"), outcome: Some(k) });
        }
    }
    let l_sigma = cov.sigma.clone().cholesky().unwrap().l();
    let l_tau = cov.tau.clone().cholesky().unwrap().l();
    let classes = sizes
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let mut x = DMatrix::zeros(m * n, p);
            let mut y = DVector::zeros(m * n);
            let z: DVector<f64> = DVector::from_fn(m, |_, _| std_normal(rng));
            let u = &l_tau * z;
            for i in 0..n {
                let covs: Vec<f64> = (0..extra).map(|_| std_normal(rng)).collect();
                let z: DVector<f64> = DVector::from_fn(m, |_, _| std_normal(rng));
                let e = &l_sigma * z;
                for k in 0..m {
                    let r = i * m + k;
                    x[(r, k)] = 1.0;
                    for (t, &c) in covs.iter().enumerate() {
                        x[(r, m + t * m + k)] = c;
                    }
                    y[r] = u[k] + e[k];
                }
            }
            ClassBlock {
                class_id: format!("c{j}"),
                school_id: format!("s{}", j / 2),
                student_ids: (0..n).map(|i| format!("c{j}i{i}")).collect(),
                n,
                y,
                x,
            }
        })
        .collect();
    StackedDesign {
        m,
        p,
        outcomes: (0..m).map(|k| format!("o{k}")).collect(),
        coef,
        classes,
    }
}
