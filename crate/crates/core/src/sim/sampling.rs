//! Stratified two-stage cluster sampling with weight computation.
//!
//! Schools are the primary units, selected within each explicit stratum by a
//! random-start fixed-interval systematic scheme with probability
//! proportional to size (PPS), after sorting by the implicit strata (school
//! type, then province). Classes are the secondary units, drawn with equal
//! probability after grouping classes below a size threshold into
//! pseudo-classes; all students of a sampled class participate. Weights are
//! the reciprocals of the stagewise selection probabilities, and nonresponse
//! adjustment redistributes weight within cells.

use std::collections::BTreeMap;

use rand::Rng;

use super::rng::RngTree;
use super::FramePopulation;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::{real, Real};
use crate::weights::{ClassWeight, SchoolWeight, StudentWeight, WeightScaling, WeightSet};

/// One school selected by the PPS stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSchool<T> {
    /// Frame index.
    pub school: usize,
    /// Inclusion probability `pi_k`.
    pub probability: f64,
    /// Sampling weight `w_k = 1 / pi_k`.
    pub weight: T,
}

/// Systematic PPS selection of `take` schools within one explicit stratum.
///
/// Schools larger than the sampling interval are promoted to certainty
/// selections (`pi = 1`) and the remainder is resampled without them.
pub fn sample_pps_systematic<T: Real>(
    frame: &FramePopulation<T>,
    stratum: &str,
    take: usize,
    rng_tree: &RngTree,
) -> Result<Vec<SelectedSchool<T>>> {
    let mut pool: Vec<usize> = (0..frame.schools.len())
        .filter(|&k| frame.stratum_of_school(k) == stratum)
        .collect();
    if pool.is_empty() {
        return Err(Error::Validation(format!("stratum `{stratum}` has no schools")));
    }
    if take > pool.len() {
        return Err(Error::Validation(format!(
            "requested {take} schools from stratum `{stratum}` with only {}",
            pool.len()
        )));
    }
    // Implicit stratification: sort by school type, then province, then id.
    pool.sort_by(|&a, &b| {
        let sa = &frame.schools[a];
        let sb = &frame.schools[b];
        sa.public
            .cmp(&sb.public)
            .then_with(|| frame.provinces[sa.province].id.cmp(&frame.provinces[sb.province].id))
            .then_with(|| sa.id.cmp(&sb.id))
    });

    let mut selected = Vec::with_capacity(take);
    let mut remaining = pool;
    let mut want = take;
    // Promote certainty units until every remaining size fits the interval.
    loop {
        if want == 0 {
            return Ok(selected);
        }
        let total: f64 = remaining.iter().map(|&k| frame.schools[k].size).sum();
        if total <= 0.0 {
            return Err(Error::Validation(format!("stratum `{stratum}` has zero total size")));
        }
        let interval = total / want as f64;
        let oversized: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&k| frame.schools[k].size > interval)
            .collect();
        if oversized.is_empty() {
            break;
        }
        for k in oversized {
            selected.push(SelectedSchool { school: k, probability: 1.0, weight: T::one() });
            remaining.retain(|&r| r != k);
            want -= 1;
        }
        if remaining.is_empty() {
            return Ok(selected);
        }
    }

    let total: f64 = remaining.iter().map(|&k| frame.schools[k].size).sum();
    let interval = total / want as f64;
    let mut rng = rng_tree.child("pps", 0).rng();
    let start: f64 = rng.random::<f64>() * interval;
    let mut points: Vec<f64> = (0..want).map(|i| start + i as f64 * interval).collect();
    let mut cum = 0.0;
    let mut next = 0usize;
    for &k in &remaining {
        let size = frame.schools[k].size;
        cum += size;
        while next < points.len() && points[next] < cum {
            let probability = (want as f64 * size / total).min(1.0);
            selected.push(SelectedSchool {
                school: k,
                probability,
                weight: real(1.0 / probability),
            });
            next += 1;
        }
    }
    debug_assert_eq!(next, points.len());
    points.clear();
    Ok(selected)
}

/// Classes drawn within one school.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedClasses<T> {
    /// Frame indices of the sampled classes (all members of the drawn
    /// units).
    pub classes: Vec<usize>,
    /// Conditional class weight `w_{j|k}`, equal for every sampled class.
    pub weight: T,
    /// Pseudo-class grouping used for the draw (each unit lists frame
    /// indices).
    pub units: Vec<Vec<usize>>,
}

/// Equal-probability class sampling with small-class grouping.
///
/// Classes below `min_size` are merged (in id order) into pseudo-classes of
/// at least the threshold size; a trailing underfull group joins the
/// previous unit. `take` units are drawn and every class inside a drawn
/// unit is sampled whole, with weight `units / drawn`.
///
/// A nonzero `lambda` tilts the single-unit draw towards classes with large
/// first-outcome effects (`pi proportional to exp(lambda u_1)`), making the
/// design informative; weights remain the reciprocal inclusion
/// probabilities.
pub fn sample_classes<T: Real>(
    frame: &FramePopulation<T>,
    school: usize,
    take: usize,
    min_size: usize,
    lambda: f64,
    rng_tree: &RngTree,
) -> Result<SelectedClasses<T>> {
    let class_idx = &frame.schools[school].classes;
    if class_idx.is_empty() {
        return Err(Error::Validation(format!(
            "school `{}` has no classes",
            frame.schools[school].id
        )));
    }
    if take == 0 {
        return Err(Error::Validation("must sample at least one class".into()));
    }

    // Group small classes into pseudo-classes, preserving id order.
    let mut units: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_size = 0usize;
    for &j in class_idx {
        current.push(j);
        current_size += frame.classes[j].size;
        if current_size >= min_size {
            units.push(std::mem::take(&mut current));
            current_size = 0;
        }
    }
    if !current.is_empty() {
        match units.last_mut() {
            Some(last) => last.extend(current),
            None => units.push(current),
        }
    }

    let n_units = units.len();
    let drawn = take.min(n_units);
    let mut rng = rng_tree.child("classes", school as u64).rng();

    if lambda != 0.0 {
        if drawn != 1 {
            return Err(Error::Validation(
                "informative class selection supports drawing one unit per school".into(),
            ));
        }
        // Tilted single draw: pi_u proportional to exp(lambda * mean u_1).
        let scores: Vec<f64> = units
            .iter()
            .map(|unit| {
                let mean_u: f64 = unit
                    .iter()
                    .map(|&j| crate::scalar::as_f64(frame.classes[j].u[0]))
                    .sum::<f64>()
                    / unit.len() as f64;
                (lambda * mean_u).exp()
            })
            .collect();
        let total: f64 = scores.iter().sum();
        let mut point = rng.random::<f64>() * total;
        let mut pick = n_units - 1;
        for (u, &s) in scores.iter().enumerate() {
            if point < s {
                pick = u;
                break;
            }
            point -= s;
        }
        let probability = scores[pick] / total;
        return Ok(SelectedClasses {
            classes: units[pick].clone(),
            weight: real(1.0 / probability),
            units,
        });
    }

    // Simple random sample of unit indices without replacement.
    let mut order: Vec<usize> = (0..n_units).collect();
    for i in 0..drawn {
        let j = rng.random_range(i..n_units);
        order.swap(i, j);
    }
    let mut picked: Vec<usize> = order[..drawn].to_vec();
    picked.sort_unstable();
    let weight = real::<T>(n_units as f64 / drawn as f64);
    let classes = picked.iter().flat_map(|&u| units[u].iter().copied()).collect();
    Ok(SelectedClasses { classes, weight, units })
}

/// Response indicators per unit id; units absent from a map count as
/// respondents.
#[derive(Debug, Clone, Default)]
pub struct ResponseIndicators {
    pub schools: BTreeMap<String, bool>,
    pub classes: BTreeMap<String, bool>,
    pub students: BTreeMap<String, bool>,
}

impl ResponseIndicators {
    fn school(&self, id: &str) -> bool {
        *self.schools.get(id).unwrap_or(&true)
    }
    fn class(&self, id: &str) -> bool {
        *self.classes.get(id).unwrap_or(&true)
    }
    fn student(&self, id: &str) -> bool {
        *self.students.get(id).unwrap_or(&true)
    }
}

/// Redistributes weight from nonrespondents to respondents within adjustment
/// cells: stratum for schools, school for classes, class for students.
/// Nonrespondents (and their descendants) are dropped from the returned set.
pub fn nonresponse_adjust<T: Real>(
    weights: &WeightSet<T>,
    resp: &ResponseIndicators,
) -> Result<WeightSet<T>> {
    // School stage, within stratum.
    let mut school_factor: BTreeMap<&str, T> = BTreeMap::new();
    {
        let mut cells: BTreeMap<&str, (T, T)> = BTreeMap::new();
        for s in &weights.schools {
            let cell = cells.entry(s.stratum.as_str()).or_insert((T::zero(), T::zero()));
            cell.0 += s.weight;
            if resp.school(&s.school_id) {
                cell.1 += s.weight;
            }
        }
        for (stratum, (sampled, responded)) in &cells {
            if *responded <= T::zero() {
                return Err(Error::Validation(format!(
                    "no responding schools in stratum `{stratum}`"
                )));
            }
            school_factor.insert(stratum, *sampled / *responded);
        }
    }
    let schools: Vec<SchoolWeight<T>> = weights
        .schools
        .iter()
        .filter(|s| resp.school(&s.school_id))
        .map(|s| SchoolWeight {
            school_id: s.school_id.clone(),
            stratum: s.stratum.clone(),
            weight: s.weight * school_factor[s.stratum.as_str()],
        })
        .collect();

    // Class stage, within responding schools.
    let mut class_factor: BTreeMap<&str, T> = BTreeMap::new();
    {
        let mut cells: BTreeMap<&str, (T, T)> = BTreeMap::new();
        for c in &weights.classes {
            if !resp.school(&c.school_id) {
                continue;
            }
            let cell = cells.entry(c.school_id.as_str()).or_insert((T::zero(), T::zero()));
            cell.0 += c.weight;
            if resp.class(&c.class_id) {
                cell.1 += c.weight;
            }
        }
        for (school, (sampled, responded)) in &cells {
            if *responded <= T::zero() {
                return Err(Error::Validation(format!(
                    "no responding classes in school `{school}`"
                )));
            }
            class_factor.insert(school, *sampled / *responded);
        }
    }
    let classes: Vec<ClassWeight<T>> = weights
        .classes
        .iter()
        .filter(|c| resp.school(&c.school_id) && resp.class(&c.class_id))
        .map(|c| ClassWeight {
            class_id: c.class_id.clone(),
            school_id: c.school_id.clone(),
            weight: c.weight * class_factor[c.school_id.as_str()],
        })
        .collect();

    // Student stage, within responding classes.
    let class_alive: Vec<&str> = classes.iter().map(|c| c.class_id.as_str()).collect();
    let mut student_factor: BTreeMap<&str, T> = BTreeMap::new();
    {
        let mut cells: BTreeMap<&str, (T, T)> = BTreeMap::new();
        for s in &weights.students {
            if !class_alive.contains(&s.class_id.as_str()) {
                continue;
            }
            let cell = cells.entry(s.class_id.as_str()).or_insert((T::zero(), T::zero()));
            cell.0 += s.weight;
            if resp.student(&s.student_id) {
                cell.1 += s.weight;
            }
        }
        for (class, (sampled, responded)) in &cells {
            if *responded <= T::zero() {
                return Err(Error::Validation(format!(
                    "no responding students in class `{class}`"
                )));
            }
            student_factor.insert(class, *sampled / *responded);
        }
    }
    let students: Vec<StudentWeight<T>> = weights
        .students
        .iter()
        .filter(|s| class_alive.contains(&s.class_id.as_str()) && resp.student(&s.student_id))
        .map(|s| StudentWeight {
            student_id: s.student_id.clone(),
            class_id: s.class_id.clone(),
            weight: s.weight * student_factor[s.class_id.as_str()],
        })
        .collect();

    Ok(WeightSet { schools, classes, students, scaling: weights.scaling })
}

/// Two-stage survey configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleConfig {
    pub seed: u64,
    /// Schools drawn per explicit stratum (capped at the stratum size).
    pub schools_per_stratum: usize,
    /// Class units drawn per school.
    pub classes_per_school: usize,
    /// Classes below this size are grouped into pseudo-classes before the
    /// draw.
    pub class_size_threshold: usize,
    /// Informativeness of the class stage (0 = noninformative).
    #[serde(default)]
    pub informative_lambda: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schools_per_stratum: 10,
            classes_per_school: 1,
            class_size_threshold: 15,
            informative_lambda: 0.0,
        }
    }
}

/// Runs the full two-stage design against a simulated population: PPS school
/// selection per stratum, class sampling per selected school, and weight
/// assembly. All students of the sampled classes participate
/// (`w_{i|jk} = 1`).
pub fn sample_survey<T: Real>(
    frame: &FramePopulation<T>,
    data: &Dataset<T>,
    config: &SampleConfig,
) -> Result<(Dataset<T>, WeightSet<T>)> {
    let tree = RngTree::new(config.seed);
    let mut strata: Vec<String> =
        (0..frame.schools.len()).map(|k| frame.stratum_of_school(k)).collect();
    strata.sort();
    strata.dedup();

    let mut schools = Vec::new();
    let mut classes = Vec::new();
    let mut students = Vec::new();
    let mut keep = vec![false; data.n_students()];

    for (si, stratum) in strata.iter().enumerate() {
        let available =
            (0..frame.schools.len()).filter(|&k| frame.stratum_of_school(k) == *stratum).count();
        let take = config.schools_per_stratum.min(available);
        let selected =
            sample_pps_systematic(frame, stratum, take, &tree.child("stratum", si as u64))?;
        for sel in selected {
            let school_info = &frame.schools[sel.school];
            schools.push(SchoolWeight {
                school_id: school_info.id.clone(),
                stratum: stratum.clone(),
                weight: sel.weight,
            });
            let picked = sample_classes(
                frame,
                sel.school,
                config.classes_per_school,
                config.class_size_threshold,
                config.informative_lambda,
                &tree.child("school", sel.school as u64),
            )?;
            for &class_idx in &picked.classes {
                let class_id = frame.classes[class_idx].id.clone();
                classes.push(ClassWeight {
                    class_id: class_id.clone(),
                    school_id: school_info.id.clone(),
                    weight: picked.weight,
                });
                for (row, &c) in data.class_of_student.iter().enumerate() {
                    if data.class_ids[c] == class_id {
                        keep[row] = true;
                        students.push(StudentWeight {
                            student_id: data.student_ids[row].clone(),
                            class_id: class_id.clone(),
                            weight: T::one(),
                        });
                    }
                }
            }
        }
    }

    let sampled = data.retain_students(&keep);
    if sampled.n_classes() < 2 {
        return Err(Error::Validation("sample produced fewer than 2 classes".into()));
    }
    let weights =
        WeightSet { schools, classes, students, scaling: WeightScaling::None };
    weights.validate()?;
    Ok((sampled, weights))
}
