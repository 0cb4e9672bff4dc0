//! Hierarchical dataset: students within classes within schools within
//! provinces, with `M` outcomes x `m` plausible values per student and
//! level-tagged covariates.
//!
//! The dataset is columnar and row-aligned on students. Higher-level
//! covariates (teacher, class, school, province) are materialized per student
//! but validated to be constant within their unit at load time.

mod io;
mod transform;

pub use io::{emit_dataset, emit_dataset_to_string, load_dataset, load_dataset_from_reader};
pub use transform::{
    apply_transforms, prepare_dataset, spline_below_knot, PrepareOptions, TransformWarning,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::scalar::Real;

/// Hierarchical level of a covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Student,
    Teacher,
    Class,
    School,
    Province,
}

impl Level {
    /// Teacher covariates attach to (class, outcome) pairs; structurally they
    /// are constant within the class like class covariates.
    pub fn unit(self) -> Level {
        match self {
            Level::Teacher => Level::Class,
            other => other,
        }
    }
}

/// Declaration of one covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateDef {
    pub name: String,
    pub level: Level,
    /// For teacher-level columns: the outcome the teacher is responsible for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
}

/// Column-to-role mapping for the CSV layer.
///
/// Outcome columns are named `<outcome>_pv<l>` for `l = 1..=plausible_values`;
/// the id columns `student_id, class_id, school_id, province_id` are fixed by
/// convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub outcomes: Vec<String>,
    pub plausible_values: usize,
    #[serde(default)]
    pub covariates: Vec<CovariateDef>,
}

impl Schema {
    pub fn from_json(json: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(json)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.outcomes.is_empty() {
            return Err(Error::Validation("schema declares no outcomes".into()));
        }
        if self.plausible_values == 0 {
            return Err(Error::Validation("plausible_values must be at least 1".into()));
        }
        for c in &self.covariates {
            if c.level == Level::Teacher && c.outcome.is_none() {
                return Err(Error::Validation(format!(
                    "teacher covariate `{}` must name its outcome",
                    c.name
                )));
            }
            if let Some(o) = &c.outcome {
                if !self.outcomes.contains(o) {
                    return Err(Error::Validation(format!(
                        "covariate `{}` references unknown outcome `{o}`",
                        c.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One covariate column, row-aligned on students; `None` marks missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate<T> {
    pub name: String,
    pub level: Level,
    pub outcome: Option<String>,
    pub values: Vec<Option<T>>,
}

/// Analysis-ready hierarchical dataset.
///
/// Scores are in score points on the international scale; indexing is
/// `scores[outcome][pv][student]` and outcome vectors are complete for every
/// student.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real> {
    pub outcomes: Vec<String>,
    pub n_pv: usize,
    pub student_ids: Vec<String>,
    /// Class index per student.
    pub class_of_student: Vec<usize>,
    pub class_ids: Vec<String>,
    /// School index per class.
    pub school_of_class: Vec<usize>,
    pub school_ids: Vec<String>,
    /// Province index per school.
    pub province_of_school: Vec<usize>,
    pub province_ids: Vec<String>,
    pub scores: Vec<Vec<Vec<T>>>,
    pub covariates: Vec<Covariate<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn n_students(&self) -> usize {
        self.student_ids.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    /// Student row indices per class, in row order.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.n_classes()];
        for (row, &c) in self.class_of_student.iter().enumerate() {
            members[c].push(row);
        }
        members
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate<T>> {
        self.covariates.iter().find(|c| c.name == name)
    }

    pub fn covariate_mut(&mut self, name: &str) -> Option<&mut Covariate<T>> {
        self.covariates.iter_mut().find(|c| c.name == name)
    }

    /// School index of a student's class.
    pub fn school_of_student(&self, row: usize) -> usize {
        self.school_of_class[self.class_of_student[row]]
    }

    /// Basic cardinality invariants; heavier structure is enforced at load.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_students();
        if self.class_of_student.len() != n {
            return Err(Error::Validation("class index misaligned with rows".into()));
        }
        if self.n_classes() < 2 {
            return Err(Error::Structure {
                unit: "dataset".into(),
                message: format!("at least 2 classes required, found {}", self.n_classes()),
            });
        }
        for (m, per_outcome) in self.scores.iter().enumerate() {
            if per_outcome.len() != self.n_pv {
                return Err(Error::Validation(format!(
                    "outcome `{}` has {} plausible-value columns, expected {}",
                    self.outcomes[m],
                    per_outcome.len(),
                    self.n_pv
                )));
            }
            for pv in per_outcome {
                if pv.len() != n {
                    return Err(Error::Validation("score column misaligned with rows".into()));
                }
            }
        }
        for c in &self.covariates {
            if c.values.len() != n {
                return Err(Error::Validation(format!(
                    "covariate `{}` misaligned with rows",
                    c.name
                )));
            }
        }
        Ok(())
    }

    /// New dataset keeping only the rows with `keep[row] == true`; classes,
    /// schools and provinces left without students are dropped and indices are
    /// rebuilt preserving first-appearance order.
    pub fn retain_students(&self, keep: &[bool]) -> Dataset<T> {
        let rows: Vec<usize> = (0..self.n_students()).filter(|&i| keep[i]).collect();

        let mut class_map: BTreeMap<usize, usize> = BTreeMap::new();
        let mut class_ids = Vec::new();
        let mut old_class_order = Vec::new();
        for &row in &rows {
            let c = self.class_of_student[row];
            class_map.entry(c).or_insert_with(|| {
                class_ids.push(self.class_ids[c].clone());
                old_class_order.push(c);
                class_ids.len() - 1
            });
        }

        let mut school_map: BTreeMap<usize, usize> = BTreeMap::new();
        let mut school_ids = Vec::new();
        let mut old_school_order = Vec::new();
        let mut school_of_class = Vec::with_capacity(class_ids.len());
        for &old_c in &old_class_order {
            let s = self.school_of_class[old_c];
            let new_s = *school_map.entry(s).or_insert_with(|| {
                school_ids.push(self.school_ids[s].clone());
                old_school_order.push(s);
                school_ids.len() - 1
            });
            school_of_class.push(new_s);
        }

        let mut province_map: BTreeMap<usize, usize> = BTreeMap::new();
        let mut province_ids = Vec::new();
        let mut province_of_school = Vec::with_capacity(school_ids.len());
        for &old_s in &old_school_order {
            let p = self.province_of_school[old_s];
            let new_p = *province_map.entry(p).or_insert_with(|| {
                province_ids.push(self.province_ids[p].clone());
                province_ids.len() - 1
            });
            province_of_school.push(new_p);
        }

        Dataset {
            outcomes: self.outcomes.clone(),
            n_pv: self.n_pv,
            student_ids: rows.iter().map(|&r| self.student_ids[r].clone()).collect(),
            class_of_student: rows.iter().map(|&r| class_map[&self.class_of_student[r]]).collect(),
            class_ids,
            school_of_class,
            school_ids,
            province_of_school,
            province_ids,
            scores: self
                .scores
                .iter()
                .map(|per_outcome| {
                    per_outcome
                        .iter()
                        .map(|pv| rows.iter().map(|&r| pv[r]).collect())
                        .collect()
                })
                .collect(),
            covariates: self
                .covariates
                .iter()
                .map(|c| Covariate {
                    name: c.name.clone(),
                    level: c.level,
                    outcome: c.outcome.clone(),
                    values: rows.iter().map(|&r| c.values[r]).collect(),
                })
                .collect(),
        }
    }

    /// Schema matching the dataset's current columns.
    pub fn schema(&self) -> Schema {
        Schema {
            outcomes: self.outcomes.clone(),
            plausible_values: self.n_pv,
            covariates: self
                .covariates
                .iter()
                .map(|c| CovariateDef {
                    name: c.name.clone(),
                    level: c.level,
                    outcome: c.outcome.clone(),
                })
                .collect(),
        }
    }
}

/// What listwise deletion removed and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub n_students_dropped: usize,
    pub n_classes_dropped: usize,
    /// Missing counts per required column, over the pre-deletion students.
    pub missing_by_column: BTreeMap<String, usize>,
}

/// Drops students with a missing value in any column required by the model;
/// classes (and schools, provinces) left empty are removed.
pub fn listwise_filter<T: Real>(
    data: &Dataset<T>,
    spec: &ModelSpec,
) -> Result<(Dataset<T>, ExclusionReport)> {
    let required = spec.filter_columns();
    let mut missing_by_column = BTreeMap::new();
    let mut keep = vec![true; data.n_students()];
    for name in &required {
        let cov = data
            .covariate(name)
            .ok_or_else(|| Error::Validation(format!("model references unknown column `{name}`")))?;
        let mut missing = 0usize;
        for (row, v) in cov.values.iter().enumerate() {
            if v.is_none() {
                missing += 1;
                keep[row] = false;
            }
        }
        missing_by_column.insert(name.clone(), missing);
    }

    let n_dropped = keep.iter().filter(|&&k| !k).count();
    if n_dropped == data.n_students() {
        return Err(Error::EmptyAnalysis(
            "all students have missing values in the model covariates".into(),
        ));
    }
    let filtered = data.retain_students(&keep);
    let report = ExclusionReport {
        n_students_dropped: n_dropped,
        n_classes_dropped: data.n_classes() - filtered.n_classes(),
        missing_by_column,
    };
    Ok((filtered, report))
}
