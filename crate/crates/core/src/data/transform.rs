//! Covariate transforms: class means, single-knot splines, centering.
//!
//! Transforms are applied in a fixed order — class means first, then spline
//! branches, then centering — so spline knots and class means always refer to
//! the original column values, while centering replaces a column in place.

use super::{Covariate, Dataset, ExclusionReport, Level};
use crate::error::{Error, Result};
use crate::model::{
    class_mean_name, spline_above_name, spline_below_name, CenterAt, ModelSpec,
};
use crate::scalar::{real, Real};

/// Non-fatal findings recorded while transforming.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransformWarning {
    /// A 0/1 indicator was centered; usually unintended.
    CenteredBinary { column: String },
}

/// Below-knot branch of a linear spline with the upper slope constrained to
/// zero: `min(x - knot, 0)`.
#[inline]
pub fn spline_below_knot<T: Real>(x: T, knot: T) -> T {
    (x - knot).min(T::zero())
}

/// Above-knot branch `max(x - knot, 0)`, used when the upper slope is left
/// free.
#[inline]
pub fn spline_above_knot<T: Real>(x: T, knot: T) -> T {
    (x - knot).max(T::zero())
}

/// Applies all transform directives of `spec` to `data`.
///
/// Grand means are computed over the rows of `data` as given (apply after
/// listwise deletion to center on the estimation sample). Derived columns are
/// appended with their standard names; centering modifies columns in place.
pub fn apply_transforms<T: Real>(
    data: &Dataset<T>,
    spec: &ModelSpec,
) -> Result<(Dataset<T>, Vec<TransformWarning>)> {
    let mut out = data.clone();
    let mut warnings = Vec::new();
    append_class_means(&mut out, spec)?;
    append_splines(&mut out, spec)?;
    center_columns(&mut out, spec, &mut warnings)?;
    Ok((out, warnings))
}

pub(crate) fn append_class_means<T: Real>(data: &mut Dataset<T>, spec: &ModelSpec) -> Result<()> {
    for col in &spec.class_means {
        let cov = data
            .covariate(col)
            .ok_or_else(|| Error::Validation(format!("class mean of unknown column `{col}`")))?;
        if cov.level != Level::Student {
            return Err(Error::Validation(format!(
                "class means aggregate student columns; `{col}` is {:?}",
                cov.level
            )));
        }
        let values = cov.values.clone();
        let members = data.class_members();
        let mut means: Vec<Option<T>> = vec![None; data.n_classes()];
        for (class, rows) in members.iter().enumerate() {
            let mut sum = T::zero();
            let mut n = 0usize;
            for &row in rows {
                if let Some(v) = values[row] {
                    sum += v;
                    n += 1;
                }
            }
            if n > 0 {
                means[class] = Some(sum / real(n as f64));
            }
        }
        let per_student = data
            .class_of_student
            .iter()
            .map(|&c| means[c])
            .collect();
        data.covariates.push(Covariate {
            name: class_mean_name(col),
            level: Level::Class,
            outcome: None,
            values: per_student,
        });
    }
    Ok(())
}

pub(crate) fn append_splines<T: Real>(data: &mut Dataset<T>, spec: &ModelSpec) -> Result<()> {
    for s in &spec.splines {
        let cov = data
            .covariate(&s.column)
            .ok_or_else(|| Error::Validation(format!("spline on unknown column `{}`", s.column)))?;
        let knot: T = real(s.knot);
        let level = cov.level;
        let below: Vec<Option<T>> =
            cov.values.iter().map(|v| v.map(|x| spline_below_knot(x, knot))).collect();
        let above: Vec<Option<T>> =
            cov.values.iter().map(|v| v.map(|x| spline_above_knot(x, knot))).collect();
        data.covariates.push(Covariate {
            name: spline_below_name(&s.column),
            level,
            outcome: None,
            values: below,
        });
        if !s.constrain_upper {
            data.covariates.push(Covariate {
                name: spline_above_name(&s.column),
                level,
                outcome: None,
                values: above,
            });
        }
    }
    Ok(())
}

pub(crate) fn center_columns<T: Real>(
    data: &mut Dataset<T>,
    spec: &ModelSpec,
    warnings: &mut Vec<TransformWarning>,
) -> Result<()> {
    for c in &spec.center {
        let cov = data
            .covariate_mut(&c.column)
            .ok_or_else(|| Error::Validation(format!("centering unknown column `{}`", c.column)))?;
        let non_missing: Vec<T> = cov.values.iter().flatten().copied().collect();
        if non_missing.is_empty() {
            return Err(Error::Validation(format!(
                "cannot center column `{}`: no observed values",
                c.column
            )));
        }
        let is_binary = non_missing.iter().all(|&v| v == T::zero() || v == T::one());
        if is_binary {
            warnings.push(TransformWarning::CenteredBinary { column: c.column.clone() });
        }
        let center = match &c.at {
            CenterAt::Value(v) => real(*v),
            CenterAt::GrandMean(_) => {
                crate::scalar::pairwise_sum(&non_missing) / real(non_missing.len() as f64)
            }
        };
        for v in cov.values.iter_mut().flatten() {
            *v -= center;
        }
    }
    Ok(())
}

/// Controls for the [`prepare_dataset`] pipeline.
#[derive(Debug, Clone, Copy)]
pub struct PrepareOptions {
    /// Compute class means before listwise deletion (on near-full samples);
    /// when false they are recomputed on the retained students only.
    pub class_means_pre_deletion: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self { class_means_pre_deletion: true }
    }
}

/// Full preparation pipeline: class means, listwise deletion on the model's
/// required columns, splines and centering on the retained students.
pub fn prepare_dataset<T: Real>(
    data: &Dataset<T>,
    spec: &ModelSpec,
    opts: PrepareOptions,
) -> Result<(Dataset<T>, ExclusionReport, Vec<TransformWarning>)> {
    spec.validate()?;
    let mut warnings = Vec::new();
    let mut working = data.clone();
    if opts.class_means_pre_deletion {
        append_class_means(&mut working, spec)?;
    }
    let (mut retained, report) = if opts.class_means_pre_deletion {
        super::listwise_filter(&working, spec)?
    } else {
        // Class-mean columns do not exist yet; filter on the remaining
        // requirements, then aggregate on the retained students.
        let mut reduced = spec.clone();
        reduced.terms.retain(|t| {
            !spec.class_means.iter().any(|c| class_mean_name(c) == t.column)
        });
        let (mut d, report) = super::listwise_filter(&working, &reduced)?;
        append_class_means(&mut d, spec)?;
        (d, report)
    };
    append_splines(&mut retained, spec)?;
    center_columns(&mut retained, spec, &mut warnings)?;
    Ok((retained, report, warnings))
}
