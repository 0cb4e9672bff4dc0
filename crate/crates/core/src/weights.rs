//! Survey weights and weighted univariate pseudo-likelihood fitting.
//!
//! Weights are carried at each hierarchical level: the conditional student
//! weight `w_{i|jk}`, the conditional class weight `w_{j|k}`, and the school
//! weight `w_k`. The unconditional class weight is their product
//! `w_jk = w_{j|k} w_k`, and the overall student weight is
//! `w_ijk = w_{i|jk} w_{j|k} w_k`.
//!
//! The weighted fit maximizes the pseudo-log-likelihood
//! `sum_j w_jk l_j(beta, sigma^2, tau^2)`, where `l_j` is the exact Gaussian
//! random-intercept class contribution with level-1 weights entering as
//! precision multipliers (student residual variance `sigma^2 / w_{i|jk}`).
//! The rank-one structure of the class covariance keeps every per-class
//! computation closed form.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::StackedDesign;
use crate::error::{Error, Result};
use crate::fit::{Convergence, FitOptions, FitResult};
use crate::optim;
use crate::scalar::{as_f64, real, Real};

/// Rescaling applied to the level-1 conditional weights before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScaling {
    /// Raw conditional weights.
    #[default]
    None,
    /// Scale student weights within each class to sum to the class size.
    ClusterSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchoolWeight<T> {
    pub school_id: String,
    pub stratum: String,
    pub weight: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeight<T> {
    pub class_id: String,
    pub school_id: String,
    /// Conditional class weight `w_{j|k}`.
    pub weight: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentWeight<T> {
    pub student_id: String,
    pub class_id: String,
    /// Conditional student weight `w_{i|jk}`.
    pub weight: T,
}

/// Per-level survey weights plus the selected level-1 scaling mode.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<T> {
    pub schools: Vec<SchoolWeight<T>>,
    pub classes: Vec<ClassWeight<T>>,
    pub students: Vec<StudentWeight<T>>,
    pub scaling: WeightScaling,
}

impl<T: Real> WeightSet<T> {
    /// All weights equal to one, matching a design's structure.
    pub fn uniform(design: &StackedDesign<T>) -> Self {
        let mut schools: Vec<SchoolWeight<T>> = Vec::new();
        let mut classes = Vec::new();
        let mut students = Vec::new();
        for class in &design.classes {
            if !schools.iter().any(|s| s.school_id == class.school_id) {
                schools.push(SchoolWeight {
                    school_id: class.school_id.clone(),
                    stratum: "all".into(),
                    weight: T::one(),
                });
            }
            classes.push(ClassWeight {
                class_id: class.class_id.clone(),
                school_id: class.school_id.clone(),
                weight: T::one(),
            });
            for sid in &class.student_ids {
                students.push(StudentWeight {
                    student_id: sid.clone(),
                    class_id: class.class_id.clone(),
                    weight: T::one(),
                });
            }
        }
        WeightSet { schools, classes, students, scaling: WeightScaling::None }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |w: T| w.is_finite() && w > T::zero();
        if let Some(s) = self.schools.iter().find(|s| !ok(s.weight)) {
            return Err(Error::Validation(format!(
                "school `{}` has non-positive weight",
                s.school_id
            )));
        }
        if let Some(c) = self.classes.iter().find(|c| !ok(c.weight)) {
            return Err(Error::Validation(format!(
                "class `{}` has non-positive weight",
                c.class_id
            )));
        }
        if let Some(s) = self.students.iter().find(|s| !ok(s.weight)) {
            return Err(Error::Validation(format!(
                "student `{}` has non-positive weight",
                s.student_id
            )));
        }
        Ok(())
    }

    /// Unconditional class weight `w_jk = w_{j|k} w_k`.
    pub fn class_unconditional(&self, class_id: &str) -> Result<T> {
        let class = self
            .classes
            .iter()
            .find(|c| c.class_id == class_id)
            .ok_or_else(|| Error::Validation(format!("no weight for class `{class_id}`")))?;
        let school = self
            .schools
            .iter()
            .find(|s| s.school_id == class.school_id)
            .ok_or_else(|| {
                Error::Validation(format!("no weight for school `{}`", class.school_id))
            })?;
        Ok(class.weight * school.weight)
    }

    /// Aligns the weights with a design: per class the unconditional class
    /// weight and the (scaled) per-student conditional weights in block
    /// order.
    pub fn resolve(&self, design: &StackedDesign<T>) -> Result<ResolvedWeights<T>> {
        self.validate()?;
        let student_by_id: HashMap<&str, T> =
            self.students.iter().map(|s| (s.student_id.as_str(), s.weight)).collect();
        let mut class_weights = Vec::with_capacity(design.n_classes());
        let mut student_weights = Vec::with_capacity(design.n_classes());
        for class in &design.classes {
            class_weights.push(self.class_unconditional(&class.class_id)?);
            let mut w: Vec<T> = Vec::with_capacity(class.n);
            for sid in &class.student_ids {
                let value = student_by_id.get(sid.as_str()).copied().ok_or_else(|| {
                    Error::Validation(format!("no weight for student `{sid}`"))
                })?;
                w.push(value);
            }
            if self.scaling == WeightScaling::ClusterSize {
                let total = w.iter().fold(T::zero(), |a, &v| a + v);
                let scale = real::<T>(class.n as f64) / total;
                for v in &mut w {
                    *v *= scale;
                }
            }
            student_weights.push(w);
        }
        Ok(ResolvedWeights { class_weights, student_weights })
    }

    /// Overall student weight `w_ijk` for reporting.
    pub fn overall_student(&self, student: &StudentWeight<T>) -> Result<T> {
        Ok(self.class_unconditional(&student.class_id)? * student.weight)
    }
}

/// Design-aligned weights.
#[derive(Debug, Clone)]
pub struct ResolvedWeights<T> {
    /// `w_jk` per class, design order.
    pub class_weights: Vec<T>,
    /// Scaled `w_{i|jk}` per class, block order.
    pub student_weights: Vec<Vec<T>>,
}

const WEIGHTS_HEADER: &str = "student_id,class_id,school_id,stratum,w_student,w_class,w_school";

/// Writes one row per student with the conditional weights of every level.
pub fn emit_weights<T: Real>(ws: &WeightSet<T>, path: &Path) -> Result<()> {
    let mut out = String::from(WEIGHTS_HEADER);
    out.push('\n');
    for s in &ws.students {
        let class = ws
            .classes
            .iter()
            .find(|c| c.class_id == s.class_id)
            .ok_or_else(|| Error::Validation(format!("no class row for `{}`", s.class_id)))?;
        let school = ws
            .schools
            .iter()
            .find(|k| k.school_id == class.school_id)
            .ok_or_else(|| Error::Validation(format!("no school row for `{}`", class.school_id)))?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.student_id, s.class_id, school.school_id, school.stratum, s.weight, class.weight,
            school.weight
        ));
    }
    File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads the flat per-student weight table back into a [`WeightSet`].
pub fn load_weights<T: Real>(path: &Path) -> Result<WeightSet<T>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    load_weights_from_str(&text)
}

pub fn load_weights_from_str<T: Real>(text: &str) -> Result<WeightSet<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("weights file missing column `{name}`")))
    };
    let cols = [
        idx("student_id")?,
        idx("class_id")?,
        idx("school_id")?,
        idx("stratum")?,
        idx("w_student")?,
        idx("w_class")?,
        idx("w_school")?,
    ];
    let mut ws = WeightSet {
        schools: Vec::new(),
        classes: Vec::new(),
        students: Vec::new(),
        scaling: WeightScaling::None,
    };
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let get = |i: usize| record.get(cols[i]).unwrap_or("").trim().to_string();
        let parse = |i: usize| -> Result<T> {
            record
                .get(cols[i])
                .unwrap_or("")
                .trim()
                .parse::<T>()
                .map_err(|_| Error::Parse { line, message: "cannot parse weight".into() })
        };
        let (student_id, class_id, school_id, stratum) = (get(0), get(1), get(2), get(3));
        let (w_student, w_class, w_school) = (parse(4)?, parse(5)?, parse(6)?);
        match ws.schools.iter().find(|s| s.school_id == school_id) {
            Some(s) if s.weight != w_school => {
                return Err(Error::Structure {
                    unit: format!("school {school_id}"),
                    message: "inconsistent school weight".into(),
                })
            }
            Some(_) => {}
            None => ws.schools.push(SchoolWeight { school_id: school_id.clone(), stratum, weight: w_school }),
        }
        match ws.classes.iter().find(|c| c.class_id == class_id) {
            Some(c) if c.weight != w_class => {
                return Err(Error::Structure {
                    unit: format!("class {class_id}"),
                    message: "inconsistent class weight".into(),
                })
            }
            Some(_) => {}
            None => ws.classes.push(ClassWeight { class_id: class_id.clone(), school_id, weight: w_class }),
        }
        ws.students.push(StudentWeight { student_id, class_id, weight: w_student });
    }
    ws.validate()?;
    Ok(ws)
}

/// Weighted pseudo-likelihood fit of a univariate random-intercept model.
///
/// Requires `M = 1`; multivariate weighted fitting is not offered.
pub fn fit_weighted_univariate<T: Real>(
    design: &StackedDesign<T>,
    weights: &WeightSet<T>,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    if design.m != 1 {
        return Err(Error::Validation(format!(
            "weighted fitting is univariate only (M = 1), design has M = {}",
            design.m
        )));
    }
    if design.n_classes() < 2 {
        return Err(Error::Validation("at least 2 classes required".into()));
    }
    design.check_full_rank()?;
    let resolved = weights.resolve(design)?;

    let start = crate::fit::starting_values(design)?;
    let theta0 = start.to_unconstrained();

    let eval = |theta: &DVector<T>| -> Result<WeightedEval<T>> {
        weighted_profiled(design, &resolved, theta)
    };
    // Two covariance parameters; central differences on the profiled
    // pseudo-likelihood.
    let rel_step = real::<T>(as_f64(T::default_epsilon().cbrt()));
    let objective = |theta: &DVector<T>| -> Result<(T, DVector<T>)> {
        let value = eval(theta)?.log_l;
        let mut grad = DVector::zeros(theta.len());
        let mut work = theta.clone();
        for k in 0..theta.len() {
            let h = rel_step * (T::one() + theta[k].abs());
            work[k] = theta[k] + h;
            let up = eval(&work)?.log_l;
            work[k] = theta[k] - h;
            let down = eval(&work)?.log_l;
            work[k] = theta[k];
            grad[k] = (up - down) / (real::<T>(2.0) * h);
        }
        Ok((value, grad))
    };
    let optim_opts = optim::Options {
        max_iter: opts.max_iter,
        tol_f_rel: real(opts.tol_loglik),
        tol_grad: real(opts.tol_grad),
        ..optim::Options::default()
    };
    let mut outcome = optim::maximize(objective, theta0, &optim_opts)?;
    if outcome.status != optim::Status::Converged
        && outcome.grad_norm <= real::<T>(1e4) * optim_opts.tol_grad
    {
        optim::newton_polish(objective, &mut outcome, optim_opts.tol_grad, 8)?;
    }

    let final_eval = weighted_profiled(design, &resolved, &outcome.x)?;
    let c_hat = crate::covariance::CovarianceParams::from_unconstrained(&outcome.x, 1)?;
    let tau = c_hat.tau[(0, 0)];
    let convergence = Convergence {
        iterations: outcome.iterations,
        grad_norm: as_f64(outcome.grad_norm),
        status: outcome.status,
        converged: outcome.status == optim::Status::Converged,
        near_singular_tau: tau < real::<T>(1e-8) * (tau + c_hat.sigma[(0, 0)]),
    };

    let mut fit = FitResult {
        outcomes: design.outcomes.clone(),
        coef: design.coef.clone(),
        beta: final_eval.beta,
        sigma: c_hat.sigma,
        tau: c_hat.tau,
        log_lik: final_eval.log_l,
        cov_model: final_eval.cov_model,
        cov_robust: None,
        cov_params: None,
        convergence,
        n_students: design.n_students(),
        n_classes: design.n_classes(),
    };
    fit.cov_robust = weighted_robust(design, &resolved, &fit).ok();
    Ok(fit)
}

struct WeightedEval<T: Real> {
    log_l: T,
    beta: DVector<T>,
    cov_model: DMatrix<T>,
}

/// One profiled evaluation of the weighted pseudo-log-likelihood.
fn weighted_profiled<T: Real>(
    design: &StackedDesign<T>,
    weights: &ResolvedWeights<T>,
    theta: &DVector<T>,
) -> Result<WeightedEval<T>> {
    let c = crate::covariance::CovarianceParams::from_unconstrained(theta, 1)?;
    let sigma2 = c.sigma[(0, 0)];
    let tau2 = c.tau[(0, 0)];
    if !(sigma2.is_finite() && tau2.is_finite()) {
        return Err(Error::Validation("covariance overflow".into()));
    }
    let p = design.p;
    let mut xtvx: DMatrix<T> = DMatrix::zeros(p, p);
    let mut xtvy: DVector<T> = DVector::zeros(p);
    // First pass: normal equations.
    for (j, class) in design.classes.iter().enumerate() {
        let w_class = weights.class_weights[j];
        let w = &weights.student_weights[j];
        let (xa, ya, s, _logdet) = class_moments(class, w, sigma2);
        let k = tau2 / (T::one() + tau2 * s);
        // X'V^{-1}X = sum a_i x_i x_i' - k (sum a_i x_i)(sum a_i x_i)'.
        for i in 0..class.n {
            let a_i = w[i] / sigma2;
            for q in 0..p {
                let xq = class.x[(i, q)] * a_i * w_class;
                xtvy[q] += xq * class.y[i];
                for r in 0..p {
                    xtvx[(q, r)] += xq * class.x[(i, r)];
                }
            }
        }
        for q in 0..p {
            let t = k * xa[q] * w_class;
            xtvy[q] -= t * ya;
            for r in 0..p {
                xtvx[(q, r)] -= t * xa[r];
            }
        }
    }
    let chol = xtvx
        .clone()
        .cholesky()
        .ok_or_else(|| crate::covariance::ill_conditioned(&xtvx, "weighted normal equations"))?;
    let beta = chol.solve(&xtvy);
    let cov_model = chol.inverse();

    // Second pass: pseudo-log-likelihood at the profiled coefficients.
    let two_pi_ln = real::<T>(std::f64::consts::TAU).ln();
    let half = real::<T>(0.5);
    let mut log_l = T::zero();
    for (j, class) in design.classes.iter().enumerate() {
        let w_class = weights.class_weights[j];
        let w = &weights.student_weights[j];
        let (_, _, s, logdet_d) = class_moments(class, w, sigma2);
        let k = tau2 / (T::one() + tau2 * s);
        let mut quad = T::zero();
        let mut ar = T::zero();
        for i in 0..class.n {
            let a_i = w[i] / sigma2;
            let r = class.y[i] - class.x.row(i).transpose().dot(&beta);
            quad += a_i * r * r;
            ar += a_i * r;
        }
        quad -= k * ar * ar;
        let logdet = logdet_d + (T::one() + tau2 * s).ln();
        let n = real::<T>(class.n as f64);
        log_l += w_class * (-half) * (n * two_pi_ln + logdet + quad);
    }
    Ok(WeightedEval { log_l, beta, cov_model })
}

/// Weighted class aggregates: `sum a_i x_i`, `sum a_i y_i`, `s = sum a_i`,
/// and `log|D| = sum log(sigma^2 / w_i)`.
fn class_moments<T: Real>(
    class: &crate::design::ClassBlock<T>,
    w: &[T],
    sigma2: T,
) -> (DVector<T>, T, T, T) {
    let p = class.x.ncols();
    let mut xa = DVector::zeros(p);
    let mut ya = T::zero();
    let mut s = T::zero();
    let mut logdet = T::zero();
    for i in 0..class.n {
        let a_i = w[i] / sigma2;
        s += a_i;
        ya += a_i * class.y[i];
        for q in 0..p {
            xa[q] += a_i * class.x[(i, q)];
        }
        logdet += (sigma2 / w[i]).ln();
    }
    (xa, ya, s, logdet)
}

/// Sandwich covariance for the weighted fit, clustered at school level.
fn weighted_robust<T: Real>(
    design: &StackedDesign<T>,
    weights: &ResolvedWeights<T>,
    fit: &FitResult<T>,
) -> Result<DMatrix<T>> {
    let sigma2 = fit.sigma[(0, 0)];
    let tau2 = fit.tau[(0, 0)];
    let p = design.p;
    let mut schools: Vec<(&str, DVector<T>)> = Vec::new();
    for (j, class) in design.classes.iter().enumerate() {
        let w_class = weights.class_weights[j];
        let w = &weights.student_weights[j];
        let (xa, _, s, _) = class_moments(class, w, sigma2);
        let k = tau2 / (T::one() + tau2 * s);
        let mut score: DVector<T> = DVector::zeros(p);
        let mut ar = T::zero();
        for i in 0..class.n {
            let a_i = w[i] / sigma2;
            let r = class.y[i] - class.x.row(i).transpose().dot(&fit.beta);
            ar += a_i * r;
            for q in 0..p {
                score[q] += a_i * r * class.x[(i, q)];
            }
        }
        for q in 0..p {
            score[q] -= k * ar * xa[q];
        }
        score *= w_class;
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
    let sandwich = &fit.cov_model * meat * &fit.cov_model;
    Ok((&sandwich + sandwich.transpose()) * real::<T>(0.5))
}
