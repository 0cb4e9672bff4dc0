//! Stacked multivariate design construction.
//!
//! Each student contributes `M` stacked rows in student-major order
//! (`(y_1ij, ..., y_Mij)` contiguous), so a class of size `n` owns an
//! `M*n` response vector and an `M*n x p` fixed-effects matrix. Outcome
//! intercepts come first; every declared term then expands according to its
//! scope: one column per outcome, a single outcome-specific column, or one
//! shared column.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, TermScope};
use crate::scalar::{real, Real};

/// One fixed-effect column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefInfo {
    /// Display name, `<outcome>:<term>` or `shared:<term>`.
    pub name: String,
    /// Term the column came from (`intercept` for the implicit intercepts).
    pub term: String,
    /// Outcome index the column applies to; `None` for shared columns.
    pub outcome: Option<usize>,
}

/// Per-class response and design blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBlock<T: Real> {
    pub class_id: String,
    pub school_id: String,
    /// Student ids in block order (one per student).
    pub student_ids: Vec<String>,
    /// Class size `n_j` (students).
    pub n: usize,
    /// Stacked responses, length `M * n`, student-major.
    pub y: DVector<T>,
    /// Stacked fixed-effects matrix, `M * n` rows by `p` columns.
    pub x: DMatrix<T>,
}

impl<T: Real> ClassBlock<T> {
    /// Student `i`'s outcome vector (length `M`).
    pub fn y_student(&self, i: usize, m: usize) -> DVector<T> {
        self.y.rows(i * m, m).into_owned()
    }

    /// Student `i`'s design block (`M x p`).
    pub fn x_student(&self, i: usize, m: usize) -> DMatrix<T> {
        self.x.rows(i * m, m).into_owned()
    }
}

/// Stacked design for all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedDesign<T: Real> {
    pub m: usize,
    pub p: usize,
    pub outcomes: Vec<String>,
    pub coef: Vec<CoefInfo>,
    pub classes: Vec<ClassBlock<T>>,
}

impl<T: Real> StackedDesign<T> {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_students(&self) -> usize {
        self.classes.iter().map(|c| c.n).sum()
    }

    pub fn coef_names(&self) -> Vec<String> {
        self.coef.iter().map(|c| c.name.clone()).collect()
    }

    /// Column indices of `term` keyed by outcome, in outcome order. Errors if
    /// the term is shared (no per-outcome coefficients to compare) or absent.
    pub fn outcome_columns(&self, term: &str) -> Result<Vec<usize>> {
        if self.coef.iter().any(|c| c.term == term && c.outcome.is_none()) {
            return Err(Error::Validation(format!(
                "term `{term}` is constrained shared across outcomes; nothing to test"
            )));
        }
        let mut cols = Vec::new();
        for m in 0..self.m {
            let found = self
                .coef
                .iter()
                .position(|c| c.term == term && c.outcome == Some(m))
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "term `{term}` has no coefficient on outcome `{}`",
                        self.outcomes[m]
                    ))
                })?;
            cols.push(found);
        }
        Ok(cols)
    }

    /// Names of (near-)collinear columns, empty when the design has full
    /// column rank. Detection is on the correlation-scaled Gram matrix.
    pub fn collinear_columns(&self) -> Vec<String> {
        let p = self.p;
        let mut gram: DMatrix<T> = DMatrix::zeros(p, p);
        for class in &self.classes {
            gram += class.x.transpose() * &class.x;
        }
        let mut flagged = Vec::new();
        let mut scale = DVector::zeros(p);
        for j in 0..p {
            let d = gram[(j, j)];
            if d <= T::default_epsilon() {
                flagged.push(self.coef[j].name.clone());
                scale[j] = T::one();
            } else {
                scale[j] = T::one() / d.sqrt();
            }
        }
        for i in 0..p {
            for j in 0..p {
                gram[(i, j)] = gram[(i, j)] * scale[i] * scale[j];
            }
        }
        let eig = gram.symmetric_eigen();
        let max_eig =
            eig.eigenvalues.iter().fold(T::zero(), |a, &v| a.max(v.abs()));
        let tol = max_eig * real::<T>(1e-10);
        for k in 0..p {
            if eig.eigenvalues[k].abs() <= tol {
                let column = eig.eigenvectors.column(k);
                let peak = column.iter().fold(T::zero(), |a, &v| a.max(v.abs()));
                for j in 0..p {
                    if column[j].abs() > peak * real::<T>(0.3) {
                        let name = self.coef[j].name.clone();
                        if !flagged.contains(&name) {
                            flagged.push(name);
                        }
                    }
                }
            }
        }
        flagged
    }

    pub fn check_full_rank(&self) -> Result<()> {
        let columns = self.collinear_columns();
        if columns.is_empty() {
            Ok(())
        } else {
            Err(Error::RankDeficient { columns })
        }
    }
}

/// Builds the stacked design for one plausible value (1-based `pv_index`).
///
/// Transforms must already be applied: every term column must exist and be
/// complete on the dataset's students.
pub fn build_design<T: Real>(
    data: &Dataset<T>,
    spec: &ModelSpec,
    pv_index: usize,
) -> Result<StackedDesign<T>> {
    spec.validate()?;
    if pv_index == 0 || pv_index > data.n_pv {
        return Err(Error::Validation(format!(
            "pv_index {pv_index} out of range 1..={}",
            data.n_pv
        )));
    }
    let m = spec.outcomes.len();
    let mut outcome_idx = Vec::with_capacity(m);
    for o in &spec.outcomes {
        let idx = data
            .outcomes
            .iter()
            .position(|d| d == o)
            .ok_or_else(|| Error::Validation(format!("dataset has no outcome `{o}`")))?;
        outcome_idx.push(idx);
    }

    // Coefficient layout: intercepts first, then terms in declaration order.
    let mut coef = Vec::new();
    for (k, o) in spec.outcomes.iter().enumerate() {
        coef.push(CoefInfo { name: format!("{o}:intercept"), term: "intercept".into(), outcome: Some(k) });
    }
    // Per term: list of (column in X, outcome index or None).
    let mut term_cols: Vec<(usize, Vec<(usize, Option<usize>)>)> = Vec::new();
    for t in &spec.terms {
        let cov = data.covariate(&t.column).ok_or_else(|| {
            Error::Validation(format!("term `{}` not found among dataset columns", t.column))
        })?;
        if let Some(tag) = &cov.outcome {
            let matches = matches!(&t.scope, TermScope::Outcome(o) if o == tag);
            if !matches {
                return Err(Error::Validation(format!(
                    "column `{}` is specific to outcome `{tag}` and must be used with that outcome scope",
                    t.column
                )));
            }
        }
        let mut cols = Vec::new();
        match &t.scope {
            TermScope::EachOutcome => {
                for (k, o) in spec.outcomes.iter().enumerate() {
                    coef.push(CoefInfo {
                        name: format!("{o}:{}", t.column),
                        term: t.column.clone(),
                        outcome: Some(k),
                    });
                    cols.push((coef.len() - 1, Some(k)));
                }
            }
            TermScope::Outcome(o) => {
                let k = spec.outcomes.iter().position(|x| x == o).unwrap();
                coef.push(CoefInfo {
                    name: format!("{o}:{}", t.column),
                    term: t.column.clone(),
                    outcome: Some(k),
                });
                cols.push((coef.len() - 1, Some(k)));
            }
            TermScope::Shared => {
                coef.push(CoefInfo {
                    name: format!("shared:{}", t.column),
                    term: t.column.clone(),
                    outcome: None,
                });
                cols.push((coef.len() - 1, None));
            }
        }
        let cov_index = data.covariates.iter().position(|c| c.name == t.column).unwrap();
        term_cols.push((cov_index, cols));
    }
    let p = coef.len();

    let members = data.class_members();
    let mut classes = Vec::with_capacity(data.n_classes());
    for (class, rows) in members.iter().enumerate() {
        let n = rows.len();
        let mut y = DVector::zeros(m * n);
        let mut x = DMatrix::zeros(m * n, p);
        for (i, &row) in rows.iter().enumerate() {
            for k in 0..m {
                let r = i * m + k;
                y[r] = data.scores[outcome_idx[k]][pv_index - 1][row];
                x[(r, k)] = T::one(); // intercept for outcome k
                for (cov_index, cols) in &term_cols {
                    let cov = &data.covariates[*cov_index];
                    let value = cov.values[row].ok_or_else(|| {
                        Error::Validation(format!(
                            "term `{}` is missing for student `{}`; run listwise deletion first",
                            cov.name, data.student_ids[row]
                        ))
                    })?;
                    for &(col, outcome) in cols {
                        match outcome {
                            Some(o) if o == k => x[(r, col)] = value,
                            None => x[(r, col)] = value,
                            _ => {}
                        }
                    }
                }
            }
        }
        classes.push(ClassBlock {
            class_id: data.class_ids[class].clone(),
            school_id: data.school_ids[data.school_of_class[class]].clone(),
            student_ids: rows.iter().map(|&r| data.student_ids[r].clone()).collect(),
            n,
            y,
            x,
        });
    }

    Ok(StackedDesign { m, p, outcomes: spec.outcomes.clone(), coef, classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Covariate, Level};
    use crate::model::Term;

    pub(crate) fn dataset_m3(n_per_class: usize, n_classes: usize) -> Dataset<f64> {
        let n = n_per_class * n_classes;
        let mut class_of_student = Vec::new();
        for c in 0..n_classes {
            class_of_student.extend(std::iter::repeat(c).take(n_per_class));
        }
        Dataset {
            outcomes: vec!["read".into(), "math".into(), "science".into()],
            n_pv: 1,
            student_ids: (0..n).map(|i| format!("st{i}")).collect(),
            class_of_student,
            class_ids: (0..n_classes).map(|c| format!("c{c}")).collect(),
            school_of_class: (0..n_classes).map(|c| c / 2).collect(),
            school_ids: (0..n_classes.div_ceil(2)).map(|s| format!("s{s}")).collect(),
            province_of_school: vec![0; n_classes.div_ceil(2)],
            province_ids: vec!["p0".into()],
            scores: (0..3)
                .map(|m| vec![(0..n).map(|i| 500.0 + (m * n + i) as f64).collect()])
                .collect(),
            covariates: vec![Covariate {
                name: "female".into(),
                level: Level::Student,
                outcome: None,
                values: (0..n).map(|i| Some((i % 2) as f64)).collect(),
            }],
        }
    }

    fn spec_m3(terms: Vec<Term>) -> ModelSpec {
        ModelSpec {
            outcomes: vec!["read".into(), "math".into(), "science".into()],
            terms,
            ..Default::default()
        }
    }

    #[test]
    fn intercept_only_single_student_is_identity() {
        let mut d = dataset_m3(1, 2);
        d.class_of_student = vec![0, 1];
        let design = build_design(&d, &spec_m3(vec![]), 1).unwrap();
        assert_eq!(design.p, 3);
        let block = &design.classes[0];
        assert_eq!(block.x, DMatrix::identity(3, 3));
    }

    #[test]
    fn female_each_outcome_block_pattern() {
        let d = dataset_m3(2, 2);
        let design = build_design(
            &d,
            &spec_m3(vec![Term { column: "female".into(), scope: TermScope::EachOutcome }]),
            1,
        )
        .unwrap();
        assert_eq!(design.p, 6);
        // Hand-written block for class 0: students 0 (female=0), 1 (female=1).
        let expected = DMatrix::from_row_slice(
            6,
            6,
            &[
                1.0, 0.0, 0.0, 0.0, 0.0, 0.0, // st0 read
                0.0, 1.0, 0.0, 0.0, 0.0, 0.0, // st0 math
                0.0, 0.0, 1.0, 0.0, 0.0, 0.0, // st0 science
                1.0, 0.0, 0.0, 1.0, 0.0, 0.0, // st1 read
                0.0, 1.0, 0.0, 0.0, 1.0, 0.0, // st1 math
                0.0, 0.0, 1.0, 0.0, 0.0, 1.0, // st1 science
            ],
        );
        assert_eq!(design.classes[0].x, expected);
        assert_eq!(design.classes[0].y[0], 500.0);
        assert_eq!(design.classes[0].y[1], 504.0);
    }

    #[test]
    fn shared_and_outcome_scopes() {
        let d = dataset_m3(2, 2);
        let design = build_design(
            &d,
            &spec_m3(vec![
                Term { column: "female".into(), scope: TermScope::Shared },
                Term { column: "female".into(), scope: TermScope::Outcome("math".into()) },
            ]),
            1,
        )
        .unwrap();
        assert_eq!(design.p, 5);
        let x = &design.classes[0].x;
        // Shared column replicated on every row of student 1.
        assert_eq!(x[(3, 3)], 1.0);
        assert_eq!(x[(4, 3)], 1.0);
        assert_eq!(x[(5, 3)], 1.0);
        // Outcome-specific column only on math rows.
        assert_eq!(x[(4, 4)], 1.0);
        assert_eq!(x[(3, 4)], 0.0);
    }

    #[test]
    fn full_spec_has_24_columns() {
        let mut d = dataset_m3(4, 4);
        let n = d.n_students();
        for name in ["lang", "preschool", "home_res", "early_tasks"] {
            d.covariates.push(Covariate {
                name: name.into(),
                level: Level::Student,
                outcome: None,
                values: (0..n).map(|i| Some((i % 3) as f64)).collect(),
            });
        }
        d.covariates.push(Covariate {
            name: "adeq_env".into(),
            level: Level::School,
            outcome: None,
            values: (0..n).map(|i| Some((d.school_of_class[d.class_of_student[i]]) as f64)).collect(),
        });
        d.covariates.push(Covariate {
            name: "gva_below_knot".into(),
            level: Level::Province,
            outcome: None,
            values: vec![Some(-45.0); n],
        });
        let terms: Vec<Term> = [
            "female", "lang", "preschool", "home_res", "early_tasks", "adeq_env",
            "gva_below_knot",
        ]
        .iter()
        .map(|c| Term { column: (*c).into(), scope: TermScope::EachOutcome })
        .collect();
        let design = build_design(&d, &spec_m3(terms), 1).unwrap();
        assert_eq!(design.p, 3 * (1 + 5 + 1 + 1));
    }

    #[test]
    fn duplicate_column_reported_as_collinear() {
        let mut d = dataset_m3(3, 2);
        let dup = d.covariates[0].clone();
        d.covariates.push(Covariate { name: "female_copy".into(), ..dup });
        let design = build_design(
            &d,
            &spec_m3(vec![
                Term { column: "female".into(), scope: TermScope::EachOutcome },
                Term { column: "female_copy".into(), scope: TermScope::EachOutcome },
            ]),
            1,
        )
        .unwrap();
        let err = design.check_full_rank().unwrap_err();
        match err {
            Error::RankDeficient { columns } => {
                assert!(columns.iter().any(|c| c.contains("female")), "{columns:?}");
            }
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn outcome_tagged_column_requires_matching_scope() {
        let mut d = dataset_m3(2, 2);
        let n = d.n_students();
        d.covariates.push(Covariate {
            name: "teacher_age".into(),
            level: Level::Teacher,
            outcome: Some("read".into()),
            values: vec![Some(45.0); n],
        });
        let bad = build_design(
            &d,
            &spec_m3(vec![Term { column: "teacher_age".into(), scope: TermScope::EachOutcome }]),
            1,
        );
        assert!(bad.is_err());
        let good = build_design(
            &d,
            &spec_m3(vec![Term {
                column: "teacher_age".into(),
                scope: TermScope::Outcome("read".into()),
            }]),
            1,
        );
        assert!(good.is_ok());
    }

    #[test]
    fn pv_index_bounds_checked() {
        let d = dataset_m3(2, 2);
        assert!(build_design(&d, &spec_m3(vec![]), 0).is_err());
        assert!(build_design(&d, &spec_m3(vec![]), 2).is_err());
    }
}
