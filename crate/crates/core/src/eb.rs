//! Empirical Bayes prediction of class effects.
//!
//! With `A_j = (Sigma + n_j T)^{-1}` and the class-mean residual `rbar_j`,
//! the posterior mean of the class effect is `u_hat_j = n_j T A_j rbar_j`.
//! Its sampling covariance splits exactly:
//!
//! ```text
//! Var(u_hat_j)        = n_j T A_j T          (diagnostic)
//! Var(u_hat_j - u_j)  = T - n_j T A_j T      (comparative)
//! ```
//!
//! so comparative + diagnostic = `T` elementwise. Comparative standard
//! errors drive the good/poor classification and caterpillar intervals;
//! diagnostic standard errors standardize the residuals for distributional
//! checks.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::StackedDesign;
use crate::dist;
use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::likelihood::CovContext;
use crate::scalar::{as_f64, real, Real};

/// Classification of a class effect against zero at a confidence level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Good,
    Poor,
    NotSignificant,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Label::Good => "good",
            Label::Poor => "poor",
            Label::NotSignificant => "ns",
        };
        f.write_str(s)
    }
}

/// Per-class Empirical Bayes predictions with their uncertainty.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct EbResiduals<T: Real> {
    pub outcomes: Vec<String>,
    pub class_ids: Vec<String>,
    pub class_sizes: Vec<usize>,
    /// Predicted class effects (score points), one `M`-vector per class.
    pub u_hat: Vec<DVector<T>>,
    /// `Var(u_hat - u)` per class.
    pub comparative_cov: Vec<DMatrix<T>>,
    /// `Var(u_hat)` per class.
    pub diagnostic_cov: Vec<DMatrix<T>>,
    /// Labels per class and outcome at the 95% level.
    pub labels: Vec<Vec<Label>>,
    /// `u_hat / diagnostic SE` per class and outcome.
    pub standardized: Vec<DVector<T>>,
}

impl<T: Real> EbResiduals<T> {
    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    fn outcome_index(&self, outcome: usize) -> Result<usize> {
        if outcome >= self.outcomes.len() {
            return Err(Error::Validation(format!(
                "outcome index {outcome} out of range for {} outcomes",
                self.outcomes.len()
            )));
        }
        Ok(outcome)
    }
}

/// Predicts all class effects from a converged fit and its design.
pub fn eb_predict<T: Real>(fit: &FitResult<T>, design: &StackedDesign<T>) -> Result<EbResiduals<T>> {
    if design.n_classes() != fit.n_classes || design.n_students() != fit.n_students {
        return Err(Error::Validation(format!(
            "design does not match the fit: {} classes / {} students vs {} / {}",
            design.n_classes(),
            design.n_students(),
            fit.n_classes,
            fit.n_students
        )));
    }
    let m = design.m;
    let c = fit.covariance_params();
    let ctx = CovContext::new(&c, design.classes.iter().map(|b| b.n))?;

    let mut class_ids = Vec::with_capacity(design.n_classes());
    let mut class_sizes = Vec::with_capacity(design.n_classes());
    let mut u_hat = Vec::with_capacity(design.n_classes());
    let mut comparative = Vec::with_capacity(design.n_classes());
    let mut diagnostic = Vec::with_capacity(design.n_classes());
    let mut standardized = Vec::with_capacity(design.n_classes());

    for class in &design.classes {
        let n = class.n;
        let nn = real::<T>(n as f64);
        let a_n = &ctx.per_size[&n].a;
        let r = &class.y - &class.x * &fit.beta;
        let mut rbar: DVector<T> = DVector::zeros(m);
        for i in 0..n {
            for a in 0..m {
                rbar[a] += r[i * m + a];
            }
        }
        rbar /= nn;

        let u = &fit.tau * a_n * &rbar * nn;
        let diag_cov = &fit.tau * a_n * &fit.tau * nn;
        let comp_cov = &fit.tau - &diag_cov;
        let std_res = DVector::from_fn(m, |a, _| u[a] / diag_cov[(a, a)].sqrt());

        class_ids.push(class.class_id.clone());
        class_sizes.push(n);
        u_hat.push(u);
        comparative.push(comp_cov);
        diagnostic.push(diag_cov);
        standardized.push(std_res);
    }

    let mut residuals = EbResiduals {
        outcomes: design.outcomes.clone(),
        class_ids,
        class_sizes,
        u_hat,
        comparative_cov: comparative,
        diagnostic_cov: diagnostic,
        labels: Vec::new(),
        standardized,
    };
    let mut labels = vec![Vec::with_capacity(m); residuals.n_classes()];
    for outcome in 0..m {
        for (j, label) in classify(&residuals, outcome, 0.95)?.into_iter().enumerate() {
            labels[j].push(label);
        }
    }
    residuals.labels = labels;
    Ok(residuals)
}

/// Averages Empirical Bayes predictions over several imputations' fits.
///
/// Covariances and labels come from the first fit's parameters; the point
/// predictions are the across-imputation means. The single-imputation
/// [`eb_predict`] on the first plausible value is the default analysis path.
pub fn eb_predict_averaged<T: Real>(
    fits: &[FitResult<T>],
    designs: &[StackedDesign<T>],
) -> Result<EbResiduals<T>> {
    if fits.is_empty() || fits.len() != designs.len() {
        return Err(Error::Validation("need one design per fit".into()));
    }
    let mut base = eb_predict(&fits[0], &designs[0])?;
    for (fit, design) in fits.iter().zip(designs).skip(1) {
        let next = eb_predict(fit, design)?;
        if next.class_ids != base.class_ids {
            return Err(Error::Validation("imputations disagree on the class set".into()));
        }
        for (acc, u) in base.u_hat.iter_mut().zip(&next.u_hat) {
            *acc += u;
        }
    }
    let count = real::<T>(fits.len() as f64);
    for u in &mut base.u_hat {
        *u /= count;
    }
    for (j, u) in base.u_hat.iter().enumerate() {
        for a in 0..base.outcomes.len() {
            base.standardized[j][a] = u[a] / base.diagnostic_cov[j][(a, a)].sqrt();
        }
    }
    for outcome in 0..base.outcomes.len() {
        let labels = classify(&base, outcome, 0.95)?;
        for (j, label) in labels.into_iter().enumerate() {
            base.labels[j][outcome] = label;
        }
    }
    Ok(base)
}

/// Labels classes whose `level` confidence interval
/// `u_hat ± z * SE_comparative` lies entirely above (good) or below (poor)
/// zero.
pub fn classify<T: Real>(eb: &EbResiduals<T>, outcome: usize, level: f64) -> Result<Vec<Label>> {
    let o = eb.outcome_index(outcome)?;
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Validation(format!("confidence level {level} outside (0, 1)")));
    }
    let z = real::<T>(dist::normal_quantile(0.5 + level / 2.0));
    Ok((0..eb.n_classes())
        .map(|j| {
            let u = eb.u_hat[j][o];
            let se = eb.comparative_cov[j][(o, o)].max(T::zero()).sqrt();
            if u - z * se > T::zero() {
                Label::Good
            } else if u + z * se < T::zero() {
                Label::Poor
            } else {
                Label::NotSignificant
            }
        })
        .collect())
}

/// One caterpillar-plot row.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct CaterpillarRow<T> {
    pub rank: usize,
    pub class_id: String,
    pub u_hat: T,
    pub lower: T,
    pub upper: T,
    pub label: Label,
}

/// Caterpillar data: classes ordered by increasing prediction with `level`
/// confidence bounds from the comparative standard errors. Ties in the
/// prediction break by class id, ascending.
pub fn caterpillar_data<T: Real>(
    eb: &EbResiduals<T>,
    outcome: usize,
    level: f64,
) -> Result<Vec<CaterpillarRow<T>>> {
    let o = eb.outcome_index(outcome)?;
    let z = real::<T>(dist::normal_quantile(0.5 + level / 2.0));
    let labels = classify(eb, outcome, level)?;
    let mut rows: Vec<CaterpillarRow<T>> = (0..eb.n_classes())
        .map(|j| {
            let u = eb.u_hat[j][o];
            let se = eb.comparative_cov[j][(o, o)].max(T::zero()).sqrt();
            CaterpillarRow {
                rank: 0,
                class_id: eb.class_ids[j].clone(),
                u_hat: u,
                lower: u - z * se,
                upper: u + z * se,
                label: labels[j],
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.u_hat
            .partial_cmp(&b.u_hat)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.class_id.cmp(&b.class_id))
    });
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i + 1;
    }
    Ok(rows)
}

/// One normal-probability-plot row.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct QqRow<T> {
    pub theoretical: T,
    pub standardized: T,
    pub class_id: String,
    /// Standardized residual outside the +-3 band.
    pub outlier: bool,
}

/// Normal probability plot data: standardized residuals (diagnostic scale)
/// sorted against normal quantiles at plotting positions `(r - 0.5) / J`.
pub fn qq_data<T: Real>(eb: &EbResiduals<T>, outcome: usize) -> Result<Vec<QqRow<T>>> {
    let o = eb.outcome_index(outcome)?;
    let j = eb.n_classes();
    if j < 3 {
        return Err(Error::Validation(format!(
            "normal probability plot needs at least 3 classes, found {j}"
        )));
    }
    for (idx, cov) in eb.diagnostic_cov.iter().enumerate() {
        let var = cov[(o, o)];
        if !(var > T::zero()) || !var.is_finite() {
            return Err(Error::Validation(format!(
                "zero diagnostic standard error for class `{}`; between-class variance is degenerate",
                eb.class_ids[idx]
            )));
        }
    }
    let mut pairs: Vec<(T, String)> = (0..j)
        .map(|idx| (eb.standardized[idx][o], eb.class_ids[idx].clone()))
        .collect();
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.1.cmp(&b.1))
    });
    Ok(pairs
        .into_iter()
        .enumerate()
        .map(|(r, (z, class_id))| {
            let pos = (r as f64 + 0.5) / j as f64;
            QqRow {
                theoretical: real(dist::normal_quantile(pos)),
                standardized: z,
                class_id,
                outlier: as_f64(z).abs() > 3.0,
            }
        })
        .collect())
}

/// Good/poor proportions for one group of classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaSummary {
    pub area: String,
    pub n_classes: usize,
    pub n_good: usize,
    pub n_poor: usize,
    pub prop_good: f64,
    pub prop_poor: f64,
}

/// Per-area good/poor proportions plus an overall row (the class-count
/// weighted average of the area rows).
pub fn territorial_summary<T: Real>(
    eb: &EbResiduals<T>,
    outcome: usize,
    groups: &BTreeMap<String, String>,
) -> Result<Vec<AreaSummary>> {
    let o = eb.outcome_index(outcome)?;
    let mut per_area: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for (j, class_id) in eb.class_ids.iter().enumerate() {
        let area = groups.get(class_id).ok_or_else(|| Error::Validation(format!(
            "class `{class_id}` has no area mapping"
        )))?;
        let entry = per_area.entry(area.as_str()).or_default();
        entry.0 += 1;
        match eb.labels[j][o] {
            Label::Good => entry.1 += 1,
            Label::Poor => entry.2 += 1,
            Label::NotSignificant => {}
        }
    }
    let mut rows: Vec<AreaSummary> = per_area
        .into_iter()
        .map(|(area, (n, good, poor))| AreaSummary {
            area: area.to_string(),
            n_classes: n,
            n_good: good,
            n_poor: poor,
            prop_good: good as f64 / n as f64,
            prop_poor: poor as f64 / n as f64,
        })
        .collect();
    let (n, good, poor) = rows
        .iter()
        .fold((0usize, 0usize, 0usize), |acc, r| {
            (acc.0 + r.n_classes, acc.1 + r.n_good, acc.2 + r.n_poor)
        });
    rows.push(AreaSummary {
        area: "overall".into(),
        n_classes: n,
        n_good: good,
        n_poor: poor,
        prop_good: good as f64 / n as f64,
        prop_poor: poor as f64 / n as f64,
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceParams;
    use crate::fit::fit_ml;
    use crate::testutil::{random_cov, random_design, rng};
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn fitted(seed: u64, m: usize, sizes: &[usize]) -> (FitResult<f64>, StackedDesign<f64>) {
        let mut r = rng(seed);
        let truth = if m == 1 {
            CovarianceParams::new(dmatrix![4.0], dmatrix![1.5]).unwrap()
        } else {
            random_cov(&mut r, m)
        };
        let design = random_design(&mut r, m, 0, sizes, &truth);
        let fit = fit_ml(&design, &crate::fit::FitOptions::default()).unwrap();
        (fit, design)
    }

    #[test]
    fn scalar_shrinkage_matches_hand_formula() {
        let (fit, design) = fitted(501, 1, &[6, 4, 8, 5, 7, 6]);
        let eb = eb_predict(&fit, &design).unwrap();
        let sigma2 = fit.sigma[(0, 0)];
        let tau2 = fit.tau[(0, 0)];
        for (j, class) in design.classes.iter().enumerate() {
            let n = class.n as f64;
            let resid: Vec<f64> =
                (0..class.n).map(|i| class.y[i] - class.x.row(i).transpose().dot(&fit.beta)).collect();
            let rbar = resid.iter().sum::<f64>() / n;
            let shrink = n * tau2 / (sigma2 + n * tau2);
            assert_relative_eq!(eb.u_hat[j][0], shrink * rbar, max_relative = 1e-10);
            // Shrinkage bound for diagonal covariances.
            assert!(eb.u_hat[j][0].abs() <= rbar.abs() + 1e-12);
        }
    }

    #[test]
    fn vanishing_between_variance_shrinks_everything_to_zero() {
        let mut r = rng(502);
        let truth = CovarianceParams::new(dmatrix![4.0], dmatrix![1.0]).unwrap();
        let design = random_design(&mut r, 1, 0, &[5, 6, 4], &truth);
        let mut fit = fit_ml(&design, &crate::fit::FitOptions::default()).unwrap();
        fit.tau = dmatrix![1e-12];
        let eb = eb_predict(&fit, &design).unwrap();
        for u in &eb.u_hat {
            assert!(u[0].abs() < 1e-9, "u = {}", u[0]);
        }
    }

    #[test]
    fn multivariate_predictions_match_dense_formula() {
        let (fit, design) = fitted(503, 3, &[3, 5, 4, 6, 2]);
        let eb = eb_predict(&fit, &design).unwrap();
        let dense = crate::dense::eb_predictions(
            &fit.covariance_params(),
            &fit.beta,
            &design,
        )
        .unwrap();
        for j in 0..design.n_classes() {
            for a in 0..3 {
                assert_relative_eq!(eb.u_hat[j][a], dense[j][a], max_relative = 1e-8, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn comparative_plus_diagnostic_equals_tau() {
        let (fit, design) = fitted(504, 3, &[4, 3, 6, 5]);
        let eb = eb_predict(&fit, &design).unwrap();
        for j in 0..eb.n_classes() {
            for a in 0..3 {
                for b in 0..3 {
                    let total = eb.comparative_cov[j][(a, b)] + eb.diagnostic_cov[j][(a, b)];
                    assert!(
                        (total - fit.tau[(a, b)]).abs() <= 1e-10 * (1.0 + fit.tau[(a, b)].abs()),
                        "identity violated at class {j} ({a},{b})"
                    );
                }
            }
        }
    }

    #[test]
    fn comparative_variance_shrinks_with_class_size() {
        let (fit, design) = fitted(505, 2, &[2, 4, 8, 16]);
        let eb = eb_predict(&fit, &design).unwrap();
        for a in 0..2 {
            for w in eb.comparative_cov.windows(2) {
                assert!(
                    w[1][(a, a)] < w[0][(a, a)] + 1e-12,
                    "comparative variance must decrease with n"
                );
            }
        }
    }

    #[test]
    fn classify_rules() {
        let (fit, design) = fitted(506, 1, &[5, 5, 5]);
        let mut eb = eb_predict(&fit, &design).unwrap();
        eb.u_hat[0][0] = 10.0;
        eb.comparative_cov[0][(0, 0)] = 4.0;
        eb.u_hat[1][0] = 0.0;
        eb.comparative_cov[1][(0, 0)] = 1.0;
        eb.u_hat[2][0] = -10.0;
        eb.comparative_cov[2][(0, 0)] = 4.0;
        let labels = classify(&eb, 0, 0.95).unwrap();
        assert_eq!(labels, vec![Label::Good, Label::NotSignificant, Label::Poor]);

        // Labels are scale invariant.
        let mut scaled = eb.clone();
        for u in &mut scaled.u_hat {
            *u *= 7.0;
        }
        for c in &mut scaled.comparative_cov {
            *c *= 49.0;
        }
        assert_eq!(classify(&scaled, 0, 0.95).unwrap(), labels);
    }

    #[test]
    fn caterpillar_ordering_and_ties() {
        let (fit, design) = fitted(507, 1, &[5, 5, 5]);
        let mut eb = eb_predict(&fit, &design).unwrap();
        eb.u_hat[0][0] = 2.0;
        eb.u_hat[1][0] = -1.0;
        eb.u_hat[2][0] = 0.0;
        let rows = caterpillar_data(&eb, 0, 0.95).unwrap();
        assert_eq!(rows.len(), eb.n_classes());
        assert_eq!(rows[0].u_hat, -1.0);
        assert_eq!(rows[1].u_hat, 0.0);
        assert_eq!(rows[2].u_hat, 2.0);
        assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2, 3]);

        // Ties break by class id.
        eb.u_hat[0][0] = 0.5;
        eb.u_hat[1][0] = 0.5;
        eb.u_hat[2][0] = 0.5;
        let tied = caterpillar_data(&eb, 0, 0.95).unwrap();
        let ids: Vec<&str> = tied.iter().map(|r| r.class_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn qq_quantiles_and_errors() {
        let (fit, design) = fitted(508, 1, &[4, 4, 4, 4, 4]);
        let eb = eb_predict(&fit, &design).unwrap();
        let rows = qq_data(&eb, 0).unwrap();
        assert_eq!(rows.len(), 5);
        for (r, row) in rows.iter().enumerate() {
            let expect = dist::normal_quantile((r as f64 + 0.5) / 5.0);
            assert_relative_eq!(row.theoretical, expect, epsilon = 1e-12);
        }

        let mut degenerate = eb.clone();
        for c in &mut degenerate.diagnostic_cov {
            c[(0, 0)] = 0.0;
        }
        assert!(qq_data(&degenerate, 0).is_err());

        let mut few = eb.clone();
        few.class_ids.truncate(2);
        few.u_hat.truncate(2);
        few.comparative_cov.truncate(2);
        few.diagnostic_cov.truncate(2);
        few.labels.truncate(2);
        few.standardized.truncate(2);
        few.class_sizes.truncate(2);
        assert!(qq_data(&few, 0).is_err());
    }

    #[test]
    fn qq_matches_standard_normal_at_scale() {
        // Standardized residuals drawn exactly from N(0,1): empirical vs
        // theoretical quantiles stay close at J = 10^4.
        let mut r = rng(509);
        let j = 10_000usize;
        let (fit, design) = fitted(510, 1, &[5, 5, 5]);
        let mut eb = eb_predict(&fit, &design).unwrap();
        eb.class_ids = (0..j).map(|i| format!("c{i:05}")).collect();
        eb.class_sizes = vec![5; j];
        eb.u_hat = (0..j).map(|_| nalgebra::dvector![0.0]).collect();
        eb.comparative_cov = vec![dmatrix![1.0]; j];
        eb.diagnostic_cov = vec![dmatrix![1.0]; j];
        eb.labels = vec![vec![Label::NotSignificant]; j];
        eb.standardized = (0..j)
            .map(|_| nalgebra::dvector![crate::testutil::std_normal(&mut r)])
            .collect();
        let rows = qq_data(&eb, 0).unwrap();
        // Distribution-scale gap max_r |Phi(z_(r)) - p_r| (extreme order
        // statistics make raw quantile gaps noisy).
        let ks_gap = rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let p = (r as f64 + 0.5) / j as f64;
                (dist::normal_cdf(row.standardized) - p).abs()
            })
            .fold(0.0f64, f64::max);
        assert!(ks_gap < 0.05, "distribution gap {ks_gap}");
        // Quantile-scale agreement in the bulk of the distribution.
        let bulk_gap = rows
            .iter()
            .filter(|row| row.theoretical.abs() < 2.0)
            .map(|row| (row.theoretical - row.standardized).abs())
            .fold(0.0f64, f64::max);
        assert!(bulk_gap < 0.05, "bulk quantile gap {bulk_gap}");
    }

    #[test]
    fn territorial_summary_rows() {
        let (fit, design) = fitted(511, 1, &[5, 5, 5, 5]);
        let mut eb = eb_predict(&fit, &design).unwrap();
        eb.labels = vec![
            vec![Label::Good],
            vec![Label::Poor],
            vec![Label::NotSignificant],
            vec![Label::Good],
        ];
        let mut groups = BTreeMap::new();
        groups.insert("c0".to_string(), "north".to_string());
        groups.insert("c1".to_string(), "north".to_string());
        groups.insert("c2".to_string(), "south".to_string());
        groups.insert("c3".to_string(), "south".to_string());
        let rows = territorial_summary(&eb, 0, &groups).unwrap();
        assert_eq!(rows.len(), 3);
        let north = &rows[0];
        assert_eq!((north.n_good, north.n_poor), (1, 1));
        let overall = rows.last().unwrap();
        assert_eq!(overall.n_classes, 4);
        assert_relative_eq!(overall.prop_good, 0.5);
        // Single area equals overall.
        let mut one = BTreeMap::new();
        for id in &eb.class_ids {
            one.insert(id.clone(), "all".into());
        }
        let rows = territorial_summary(&eb, 0, &one).unwrap();
        assert_eq!(rows[0].prop_good, rows[1].prop_good);

        groups.remove("c3");
        assert!(territorial_summary(&eb, 0, &groups).is_err());
    }

    #[test]
    fn all_nonsignificant_gives_zero_proportions() {
        let (fit, design) = fitted(512, 1, &[5, 5]);
        let mut eb = eb_predict(&fit, &design).unwrap();
        eb.labels = vec![vec![Label::NotSignificant]; 2];
        let mut groups = BTreeMap::new();
        for id in &eb.class_ids {
            groups.insert(id.clone(), "a".into());
        }
        let rows = territorial_summary(&eb, 0, &groups).unwrap();
        for row in rows {
            assert_eq!(row.prop_good, 0.0);
            assert_eq!(row.prop_poor, 0.0);
        }
    }

    #[test]
    fn mismatched_design_is_rejected() {
        let (fit, _) = fitted(513, 1, &[5, 5, 5]);
        let mut r = rng(514);
        let other = random_design(
            &mut r,
            1,
            0,
            &[4, 4],
            &CovarianceParams::new(dmatrix![1.0], dmatrix![1.0]).unwrap(),
        );
        assert!(eb_predict(&fit, &other).is_err());
    }
}
