//! CSV ingestion and emission for hierarchical datasets.
//!
//! Input layout: a header row with `student_id, class_id, school_id,
//! province_id`, one `<outcome>_pv<l>` column per outcome and plausible
//! value, and one column per declared covariate. Missing covariate values are
//! an empty field or the literal `NA`; outcome values must be complete.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Covariate, Dataset, Level, Schema};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Loads a dataset from a CSV file, validating nesting and level constancy.
pub fn load_dataset<T: Real>(path: &Path, schema: &Schema) -> Result<Dataset<T>> {
    let file = File::open(path)?;
    load_dataset_from_reader(file, schema)
}

/// Same as [`load_dataset`] but from any reader.
pub fn load_dataset_from_reader<T: Real, R: Read>(reader: R, schema: &Schema) -> Result<Dataset<T>> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col_index: HashMap<&str, usize> =
        headers.iter().enumerate().map(|(i, h)| (h, i)).collect();

    let require = |name: &str| -> Result<usize> {
        col_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("missing required column `{name}`")))
    };

    let id_cols = [
        require("student_id")?,
        require("class_id")?,
        require("school_id")?,
        require("province_id")?,
    ];
    let m = schema.outcomes.len();
    let n_pv = schema.plausible_values;
    let mut score_cols = Vec::with_capacity(m * n_pv);
    for outcome in &schema.outcomes {
        for l in 1..=n_pv {
            score_cols.push(require(&format!("{outcome}_pv{l}"))?);
        }
    }
    let cov_cols: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| require(&c.name))
        .collect::<Result<_>>()?;

    let mut data = Dataset {
        outcomes: schema.outcomes.clone(),
        n_pv,
        student_ids: Vec::new(),
        class_of_student: Vec::new(),
        class_ids: Vec::new(),
        school_of_class: Vec::new(),
        school_ids: Vec::new(),
        province_of_school: Vec::new(),
        province_ids: Vec::new(),
        scores: vec![vec![Vec::new(); n_pv]; m],
        covariates: schema
            .covariates
            .iter()
            .map(|c| Covariate {
                name: c.name.clone(),
                level: c.level,
                outcome: c.outcome.clone(),
                values: Vec::new(),
            })
            .collect(),
    };

    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut school_index: HashMap<String, usize> = HashMap::new();
    let mut province_index: HashMap<String, usize> = HashMap::new();
    let mut student_seen: HashMap<String, ()> = HashMap::new();

    for record in rdr.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(data.n_students() + 2);
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| Error::Parse {
                line,
                message: format!("row has {} fields, expected at least {}", record.len(), i + 1),
            })
        };

        let student_id = field(id_cols[0])?.trim().to_string();
        let class_id = field(id_cols[1])?.trim().to_string();
        let school_id = field(id_cols[2])?.trim().to_string();
        let province_id = field(id_cols[3])?.trim().to_string();
        if student_id.is_empty() {
            return Err(Error::Parse { line, message: "empty student_id".into() });
        }
        if student_seen.insert(student_id.clone(), ()).is_some() {
            return Err(Error::Structure {
                unit: format!("student {student_id}"),
                message: "duplicate student id".into(),
            });
        }

        let province = *province_index.entry(province_id.clone()).or_insert_with(|| {
            data.province_ids.push(province_id.clone());
            data.province_ids.len() - 1
        });
        let school = match school_index.get(&school_id) {
            Some(&s) => {
                if data.province_of_school[s] != province {
                    return Err(Error::Structure {
                        unit: format!("school {school_id}"),
                        message: format!(
                            "appears under provinces {} and {province_id}",
                            data.province_ids[data.province_of_school[s]]
                        ),
                    });
                }
                s
            }
            None => {
                data.school_ids.push(school_id.clone());
                data.province_of_school.push(province);
                let s = data.school_ids.len() - 1;
                school_index.insert(school_id.clone(), s);
                s
            }
        };
        let class = match class_index.get(&class_id) {
            Some(&c) => {
                if data.school_of_class[c] != school {
                    return Err(Error::Structure {
                        unit: format!("class {class_id}"),
                        message: format!(
                            "appears under schools {} and {school_id}",
                            data.school_ids[data.school_of_class[c]]
                        ),
                    });
                }
                c
            }
            None => {
                data.class_ids.push(class_id.clone());
                data.school_of_class.push(school);
                let c = data.class_ids.len() - 1;
                class_index.insert(class_id.clone(), c);
                c
            }
        };

        data.student_ids.push(student_id);
        data.class_of_student.push(class);

        for (k, &col) in score_cols.iter().enumerate() {
            let raw = field(col)?;
            let value = parse_value::<T>(raw, line)?.ok_or_else(|| Error::Parse {
                line,
                message: format!(
                    "missing outcome value in column `{}`; outcome vectors must be complete",
                    &headers[col]
                ),
            })?;
            data.scores[k / n_pv][k % n_pv].push(value);
        }
        for (k, &col) in cov_cols.iter().enumerate() {
            let value = parse_value::<T>(field(col)?, line)?;
            data.covariates[k].values.push(value);
        }
    }

    if data.n_students() == 0 {
        return Err(Error::Validation("dataset has no rows".into()));
    }
    data.validate()?;
    check_level_constancy(&data)?;
    Ok(data)
}

fn parse_value<T: Real>(raw: &str, line: usize) -> Result<Option<T>> {
    let s = raw.trim();
    if s.is_empty() || s == "NA" {
        return Ok(None);
    }
    s.parse::<T>().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse `{s}` as a number"),
    })
}

/// Higher-level covariates must be identical (including missingness) across
/// all students of their unit.
fn check_level_constancy<T: Real>(data: &Dataset<T>) -> Result<()> {
    for cov in &data.covariates {
        let unit = cov.level.unit();
        if unit == Level::Student {
            continue;
        }
        let unit_of_row = |row: usize| -> usize {
            let class = data.class_of_student[row];
            match unit {
                Level::Class => class,
                Level::School => data.school_of_class[class],
                Level::Province => data.province_of_school[data.school_of_class[class]],
                _ => unreachable!(),
            }
        };
        let n_units = match unit {
            Level::Class => data.n_classes(),
            Level::School => data.school_ids.len(),
            Level::Province => data.province_ids.len(),
            _ => unreachable!(),
        };
        let mut seen: Vec<Option<Option<T>>> = vec![None; n_units];
        for row in 0..data.n_students() {
            let u = unit_of_row(row);
            match &seen[u] {
                None => seen[u] = Some(cov.values[row]),
                Some(prev) => {
                    if *prev != cov.values[row] {
                        let unit_id = match unit {
                            Level::Class => &data.class_ids[u],
                            Level::School => &data.school_ids[u],
                            Level::Province => &data.province_ids[u],
                            _ => unreachable!(),
                        };
                        return Err(Error::Structure {
                            unit: format!("{:?} {unit_id}", unit).to_lowercase(),
                            message: format!("covariate `{}` is not constant within the unit", cov.name),
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

/// Writes the dataset as CSV; emission is deterministic and `load -> emit`
/// round-trips byte-identically on files this writer produced.
pub fn emit_dataset<T: Real>(data: &Dataset<T>, path: &Path) -> Result<()> {
    let mut out = String::new();
    write_csv(data, &mut out);
    let mut file = File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// CSV emission into a string (used by tests and the simulator).
pub fn emit_dataset_to_string<T: Real>(data: &Dataset<T>) -> String {
    let mut out = String::new();
    write_csv(data, &mut out);
    out
}

fn write_csv<T: Real>(data: &Dataset<T>, out: &mut String) {
    use std::fmt::Write as _;
    out.push_str("student_id,class_id,school_id,province_id");
    for outcome in &data.outcomes {
        for l in 1..=data.n_pv {
            let _ = write!(out, ",{outcome}_pv{l}");
        }
    }
    for cov in &data.covariates {
        let _ = write!(out, ",{}", cov.name);
    }
    out.push('\n');
    for row in 0..data.n_students() {
        let class = data.class_of_student[row];
        let school = data.school_of_class[class];
        let province = data.province_of_school[school];
        let _ = write!(
            out,
            "{},{},{},{}",
            data.student_ids[row], data.class_ids[class], data.school_ids[school],
            data.province_ids[province]
        );
        for per_outcome in &data.scores {
            for pv in per_outcome {
                let _ = write!(out, ",{}", pv[row]);
            }
        }
        for cov in &data.covariates {
            match cov.values[row] {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CovariateDef;

    fn schema() -> Schema {
        Schema {
            outcomes: vec!["read".into(), "math".into(), "science".into()],
            plausible_values: 1,
            covariates: vec![CovariateDef {
                name: "female".into(),
                level: Level::Student,
                outcome: None,
            }],
        }
    }

    const MINIMAL: &str = "\
student_id,class_id,school_id,province_id,read_pv1,math_pv1,science_pv1,female
st1,c1,s1,p1,510,500,505,1
st2,c1,s1,p1,490,505,495,0
st3,c2,s1,p1,530,520,510,NA
st4,c2,s1,p1,470,480,465,1
";

    #[test]
    fn loads_minimal_file() {
        let d: Dataset<f64> = load_dataset_from_reader(MINIMAL.as_bytes(), &schema()).unwrap();
        assert_eq!(d.n_students(), 4);
        assert_eq!(d.n_classes(), 2);
        assert_eq!(d.n_outcomes(), 3);
        assert_eq!(d.scores[2][0][3], 465.0);
        assert_eq!(d.covariate("female").unwrap().values[2], None);
    }

    #[test]
    fn broken_nesting_is_structural_error() {
        let bad = MINIMAL.replace("st4,c2,s1,p1", "st4,c2,s2,p1");
        let err = load_dataset_from_reader::<f64, _>(bad.as_bytes(), &schema()).unwrap_err();
        match err {
            Error::Structure { unit, .. } => assert!(unit.contains("c2"), "unit = {unit}"),
            other => panic!("expected structural error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_number_reports_line() {
        let bad = MINIMAL.replace("470", "47O");
        let err = load_dataset_from_reader::<f64, _>(bad.as_bytes(), &schema()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_outcome_is_rejected() {
        let bad = MINIMAL.replace("530,520,510", "530,,510");
        let err = load_dataset_from_reader::<f64, _>(bad.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err:?}");
    }

    #[test]
    fn nonconstant_school_covariate_is_rejected() {
        let mut schema = schema();
        schema.covariates.push(CovariateDef {
            name: "env".into(),
            level: Level::School,
            outcome: None,
        });
        let csv = "\
student_id,class_id,school_id,province_id,read_pv1,math_pv1,science_pv1,female,env
st1,c1,s1,p1,510,500,505,1,9.5
st2,c1,s1,p1,490,505,495,0,9.6
st3,c2,s1,p1,530,520,510,0,9.5
st4,c2,s1,p1,470,480,465,1,9.5
";
        let err = load_dataset_from_reader::<f64, _>(csv.as_bytes(), &schema).unwrap_err();
        match err {
            Error::Structure { unit, message } => {
                assert!(unit.contains("s1"));
                assert!(message.contains("env"));
            }
            other => panic!("expected structural error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_student_rejected() {
        let bad = MINIMAL.replace("st4", "st1");
        let err = load_dataset_from_reader::<f64, _>(bad.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Structure { .. }));
    }

    #[test]
    fn emit_then_load_is_byte_identical() {
        let d: Dataset<f64> = load_dataset_from_reader(MINIMAL.as_bytes(), &schema()).unwrap();
        let emitted = emit_dataset_to_string(&d);
        let d2: Dataset<f64> =
            load_dataset_from_reader(emitted.as_bytes(), &schema()).unwrap();
        assert_eq!(d, d2);
        assert_eq!(emit_dataset_to_string(&d2), emitted);
    }

    #[test]
    fn single_class_is_rejected() {
        let csv = "\
student_id,class_id,school_id,province_id,read_pv1,math_pv1,science_pv1,female
st1,c1,s1,p1,510,500,505,1
st2,c1,s1,p1,490,505,495,0
";
        let err = load_dataset_from_reader::<f64, _>(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::Structure { .. }));
    }
}
