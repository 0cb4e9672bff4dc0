//! Model specification: outcomes, fixed-effect terms, covariate transforms.
//!
//! A [`ModelSpec`] is the JSON-facing description of one model: which outcome
//! columns it explains, which covariates enter the fixed part and with what
//! scope (per-outcome, single outcome, or one coefficient shared across
//! outcomes), and the transform directives (grand-mean centering, a linear
//! spline with one knot, class means of student covariates) applied before
//! the design is stacked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficient scope of a fixed-effect term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermScope {
    /// One coefficient per outcome (the usual multivariate layout).
    EachOutcome,
    /// A single coefficient constrained equal across all outcomes.
    Shared,
    /// A coefficient on one named outcome only.
    Outcome(String),
}

/// One fixed-effect term; intercepts are implicit and always per outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub column: String,
    #[serde(default = "default_scope")]
    pub scope: TermScope,
}

fn default_scope() -> TermScope {
    TermScope::EachOutcome
}

/// Where to center a continuous covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CenterAt {
    /// Center at the sample grand mean of the column.
    GrandMean(GrandMeanTag),
    /// Center at a fixed value (e.g. a national average of 100).
    Value(f64),
}

/// Serde tag so that `"grand_mean"` deserializes into [`CenterAt::GrandMean`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrandMeanTag {
    GrandMean,
}

impl CenterAt {
    pub const GRAND_MEAN: CenterAt = CenterAt::GrandMean(GrandMeanTag::GrandMean);
}

/// Centering directive for one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterSpec {
    pub column: String,
    pub at: CenterAt,
}

/// Linear spline with a single knot.
///
/// The below-knot branch `min(x - knot, 0)` is always produced; when
/// `constrain_upper` is false the above-knot branch `max(x - knot, 0)` is
/// produced as well, otherwise the upper slope is constrained to zero by
/// omitting that column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub column: String,
    pub knot: f64,
    #[serde(default = "default_true")]
    pub constrain_upper: bool,
}

fn default_true() -> bool {
    true
}

/// Full model specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelSpec {
    pub outcomes: Vec<String>,
    #[serde(default)]
    pub terms: Vec<Term>,
    #[serde(default)]
    pub center: Vec<CenterSpec>,
    #[serde(default)]
    pub splines: Vec<SplineSpec>,
    #[serde(default)]
    pub class_means: Vec<String>,
}

/// Derived column name for a class mean of `column`.
pub fn class_mean_name(column: &str) -> String {
    format!("{column}_class_mean")
}

/// Derived column name for the below-knot spline branch of `column`.
pub fn spline_below_name(column: &str) -> String {
    format!("{column}_below_knot")
}

/// Derived column name for the above-knot spline branch of `column`.
pub fn spline_above_name(column: &str) -> String {
    format!("{column}_above_knot")
}

impl ModelSpec {
    pub fn from_json(json: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Checks internal consistency (column references against a dataset are
    /// checked where the transforms are applied).
    pub fn validate(&self) -> Result<()> {
        if self.outcomes.is_empty() {
            return Err(Error::Validation("model declares no outcomes".into()));
        }
        for s in &self.splines {
            if !s.knot.is_finite() {
                return Err(Error::Validation(format!(
                    "spline knot for column `{}` must be finite",
                    s.column
                )));
            }
        }
        for (i, c) in self.center.iter().enumerate() {
            if self.center[..i].iter().any(|o| o.column == c.column) {
                return Err(Error::Validation(format!(
                    "column `{}` is centered more than once",
                    c.column
                )));
            }
        }
        for (i, s) in self.splines.iter().enumerate() {
            if self.splines[..i].iter().any(|o| o.column == s.column) {
                return Err(Error::Validation(format!(
                    "column `{}` has more than one spline",
                    s.column
                )));
            }
        }
        for t in &self.terms {
            if let TermScope::Outcome(o) = &t.scope {
                if !self.outcomes.contains(o) {
                    return Err(Error::Validation(format!(
                        "term `{}` references unknown outcome `{o}`",
                        t.column
                    )));
                }
            }
        }
        Ok(())
    }

    /// Source column a term needs per student, resolving derived names back
    /// through the transform directives. Class-mean columns resolve to the
    /// derived column itself (the student's own value is not required).
    pub fn term_source(&self, term_column: &str) -> String {
        for s in &self.splines {
            if term_column == spline_below_name(&s.column)
                || term_column == spline_above_name(&s.column)
            {
                return s.column.clone();
            }
        }
        term_column.to_string()
    }

    /// Columns whose per-student values must be complete for a student to be
    /// retained: direct term sources plus derived class-mean columns used as
    /// terms.
    pub fn filter_columns(&self) -> Vec<String> {
        let mut cols = Vec::new();
        for t in &self.terms {
            let col = self.term_source(&t.column);
            if !cols.contains(&col) {
                cols.push(col);
            }
        }
        cols
    }

    /// True when `column` is produced by one of the transform directives.
    pub fn is_derived(&self, column: &str) -> bool {
        self.class_means.iter().any(|c| class_mean_name(c) == column)
            || self.splines.iter().any(|s| {
                spline_below_name(&s.column) == column || spline_above_name(&s.column) == column
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_json() -> &'static str {
        r#"{
            "outcomes": ["read", "math", "science"],
            "terms": [
                {"column": "female"},
                {"column": "gva_below_knot"},
                {"column": "female_class_mean"},
                {"column": "teacher_age", "scope": {"outcome": "read"}},
                {"column": "shared_thing", "scope": "shared"}
            ],
            "center": [
                {"column": "home_res", "at": "grand_mean"},
                {"column": "gva", "at": 100.0}
            ],
            "splines": [{"column": "gva", "knot": 100.0}],
            "class_means": ["female"]
        }"#
    }

    #[test]
    fn parses_full_spec() {
        let spec = ModelSpec::from_json(spec_json()).unwrap();
        assert_eq!(spec.outcomes.len(), 3);
        assert_eq!(spec.terms[3].scope, TermScope::Outcome("read".into()));
        assert_eq!(spec.terms[4].scope, TermScope::Shared);
        assert_eq!(spec.center[0].at, CenterAt::GRAND_MEAN);
        assert_eq!(spec.center[1].at, CenterAt::Value(100.0));
        assert!(spec.splines[0].constrain_upper);
    }

    #[test]
    fn filter_columns_resolve_sources() {
        let spec = ModelSpec::from_json(spec_json()).unwrap();
        let cols = spec.filter_columns();
        assert!(cols.contains(&"female".to_string()));
        assert!(cols.contains(&"gva".to_string()), "spline resolves to source");
        assert!(cols.contains(&"female_class_mean".to_string()));
        assert!(!cols.contains(&"gva_below_knot".to_string()));
    }

    #[test]
    fn rejects_double_centering() {
        let mut spec = ModelSpec::from_json(spec_json()).unwrap();
        spec.center.push(CenterSpec { column: "home_res".into(), at: CenterAt::Value(1.0) });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rejects_unknown_outcome_scope() {
        let mut spec = ModelSpec::from_json(spec_json()).unwrap();
        spec.terms.push(Term { column: "x".into(), scope: TermScope::Outcome("nope".into()) });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rejects_nonfinite_knot() {
        let mut spec = ModelSpec::from_json(spec_json()).unwrap();
        spec.splines[0].knot = f64::NAN;
        assert!(spec.validate().is_err());
    }
}
