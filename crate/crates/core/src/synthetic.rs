//! Seeded synthetic perioperative corpus and dataset splitting.
//!
//! Durations follow a log-additive model: department effect, procedure
//! effect, deviation of the recorded surgery level from the procedure's
//! usual level, a latent patient-complexity score, emergency status and
//! residual noise. The raw log-normal durations are then affinely rescaled
//! to the requested global mean and standard deviation, rounded to whole
//! minutes and clamped to `[min_minutes, max_minutes]`.
//!
//! Several numerical features (some laboratory values among them) share
//! the complexity factor and two share the procedure factor, so they form
//! strong principal components; the remaining laboratory values are
//! independent noise.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{CaseSet, FeatureDef, FeatureKind, FeatureSchema, SurgicalCase, Value};

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("invalid synthetic spec: {0}")]
    Synthetic(String),
    #[error("invalid split ratios: {0}")]
    Ratios(String),
}

pub const LEVELS: [&str; 4] = ["I", "II", "III", "IV"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureSpec {
    pub name: String,
    /// Log-scale duration effect relative to the department.
    pub effect: f64,
    /// Usual surgery level, index into `LEVELS`.
    pub level: usize,
    pub anesthesia: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepartmentSpec {
    pub name: String,
    pub effect: f64,
    /// Relative sampling weight.
    pub share: f64,
    pub procedures: Vec<ProcedureSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_cases: usize,
    pub departments: Vec<DepartmentSpec>,
    pub target_mean: f64,
    pub target_sd: f64,
    /// Log-scale weight of the latent complexity score.
    pub complexity_effect: f64,
    pub level_effect: f64,
    pub emergency_effect: f64,
    pub emergency_rate: f64,
    /// Log-scale residual noise.
    pub noise_sd: f64,
    /// Probability that `bmi` or `hemoglobin` is left blank.
    pub missing_rate: f64,
    pub min_minutes: f64,
    pub max_minutes: f64,
}

type CatalogEntry = (&'static str, f64, [(&'static str, f64, usize, &'static str); 5]);

const CATALOG: [CatalogEntry; 8] = [
    ("Breast and Thyroid Surgery", 0.0, [
        ("total thyroidectomy", 0.10, 2, "general"),
        ("partial thyroidectomy", -0.10, 1, "general"),
        ("lumpectomy", -0.30, 1, "general"),
        ("modified radical mastectomy", 0.25, 2, "general"),
        ("sentinel lymph node biopsy", -0.40, 0, "intravenous"),
    ]),
    ("Orthopedics", 0.35, [
        ("total knee arthroplasty", 0.10, 2, "regional"),
        ("total hip arthroplasty", 0.15, 2, "regional"),
        ("posterior spinal fusion", 0.50, 3, "general"),
        ("arthroscopic meniscectomy", -0.40, 1, "regional"),
        ("open reduction internal fixation", -0.10, 1, "general"),
    ]),
    ("Cardiothoracic Surgery", 0.90, [
        ("coronary artery bypass grafting", 0.20, 3, "general"),
        ("aortic valve replacement", 0.25, 3, "general"),
        ("thoracoscopic lobectomy", -0.10, 2, "general"),
        ("pacemaker implantation", -0.80, 1, "local"),
        ("thoracoscopic wedge resection", -0.30, 2, "general"),
    ]),
    ("General Surgery", 0.0, [
        ("laparoscopic cholecystectomy", -0.20, 1, "general"),
        ("laparoscopic appendectomy", -0.35, 1, "general"),
        ("inguinal hernia repair", -0.30, 1, "regional"),
        ("right hemicolectomy", 0.45, 3, "general"),
        ("radical gastrectomy", 0.55, 3, "general"),
    ]),
    ("Urology", -0.20, [
        ("transurethral resection of prostate", -0.10, 1, "regional"),
        ("laparoscopic nephrectomy", 0.40, 2, "general"),
        ("diagnostic cystoscopy", -0.90, 0, "local"),
        ("ureteroscopic lithotripsy", -0.30, 1, "regional"),
        ("radical prostatectomy", 0.55, 3, "general"),
    ]),
    ("Ophthalmology", -1.0, [
        ("phacoemulsification cataract extraction", -0.30, 0, "local"),
        ("pars plana vitrectomy", 0.30, 2, "local"),
        ("trabeculectomy", 0.05, 1, "local"),
        ("strabismus correction", 0.00, 1, "general"),
        ("penetrating keratoplasty", 0.20, 2, "general"),
    ]),
    ("Neurosurgery", 0.80, [
        ("craniotomy for tumor resection", 0.30, 3, "general"),
        ("ventriculoperitoneal shunt", -0.50, 1, "general"),
        ("lumbar microdiscectomy", -0.30, 2, "general"),
        ("anterior cervical discectomy and fusion", -0.10, 2, "general"),
        ("deep brain stimulator placement", 0.40, 3, "general"),
    ]),
    ("Gynecology", -0.30, [
        ("operative hysteroscopy", -0.60, 0, "intravenous"),
        ("laparoscopic hysterectomy", 0.30, 2, "general"),
        ("laparoscopic myomectomy", 0.15, 2, "general"),
        ("ovarian cystectomy", -0.10, 1, "general"),
        ("cesarean section", -0.20, 1, "regional"),
    ]),
];

impl SyntheticSpec {
    /// A corpus shaped after a large general hospital: global mean 155 and
    /// standard deviation 84 minutes, clamped to `[8, 810]`.
    ///
    /// The first eight departments come from a fixed clinical catalog;
    /// further departments get generic names and deterministic effects.
    pub fn standard(n_cases: usize, n_departments: usize) -> Self {
        let departments = (0..n_departments)
            .map(|d| match CATALOG.get(d) {
                Some((name, effect, procs)) => DepartmentSpec {
                    name: name.to_string(),
                    effect: *effect,
                    share: 1.0,
                    procedures: procs
                        .iter()
                        .map(|(p, e, l, a)| ProcedureSpec {
                            name: p.to_string(),
                            effect: *e,
                            level: *l,
                            anesthesia: a.to_string(),
                        })
                        .collect(),
                },
                None => {
                    let effect = ((d as f64 * 0.618_034).fract() - 0.5) * 1.6;
                    DepartmentSpec {
                        name: format!("Department {}", d + 1),
                        effect,
                        share: 1.0,
                        procedures: (0..5)
                            .map(|p| ProcedureSpec {
                                name: format!("department {} procedure {}", d + 1, p + 1),
                                effect: (p as f64 - 2.0) * 0.2,
                                level: p.min(3),
                                anesthesia: "general".into(),
                            })
                            .collect(),
                    }
                }
            })
            .collect();
        SyntheticSpec {
            n_cases,
            departments,
            target_mean: 155.0,
            target_sd: 84.0,
            complexity_effect: 0.25,
            level_effect: 0.15,
            emergency_effect: 0.2,
            emergency_rate: 0.08,
            noise_sd: 0.2,
            missing_rate: 0.02,
            min_minutes: 8.0,
            max_minutes: 810.0,
        }
    }

    fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: &str| Err(SpecError::Synthetic(m.to_string()));
        if self.n_cases == 0 {
            return bad("n_cases must be positive");
        }
        if self.departments.is_empty() {
            return bad("at least one department is required");
        }
        for d in &self.departments {
            if d.procedures.is_empty() {
                return bad("every department needs at least one procedure");
            }
            if !(d.share > 0.0 && d.share.is_finite()) {
                return bad("department shares must be positive");
            }
            if d.procedures.iter().any(|p| p.level >= LEVELS.len()) {
                return bad("procedure level out of range");
            }
        }
        if !(self.target_mean > 0.0 && self.target_sd > 0.0) {
            return bad("target mean and sd must be positive");
        }
        if !(0.0..=1.0).contains(&self.missing_rate) || !(0.0..=1.0).contains(&self.emergency_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if !(self.min_minutes > 0.0 && self.max_minutes > self.min_minutes) {
            return bad("duration clamp range is empty");
        }
        Ok(())
    }
}

/// The schema of corpora produced by [`generate_synthetic`].
pub fn synthetic_schema() -> FeatureSchema {
    use FeatureKind::*;
    let features = [
        ("age", Numerical),
        ("bmi", Numerical),
        ("comorbidity_index", Numerical),
        ("procedure_rvu", Numerical),
        ("expected_blood_loss_ml", Numerical),
        ("hemoglobin", Numerical),
        ("heart_rate", Numerical),
        ("platelet_count", Numerical),
        ("creatinine", Numerical),
        ("sodium", Numerical),
        ("potassium", Numerical),
        ("white_cell_count", Numerical),
        ("glucose", Numerical),
        ("asa_grade", Ordinal),
        ("surgery_level", Ordinal),
        ("department", Categorical),
        ("gender", Categorical),
        ("anesthesia_type", Categorical),
        ("emergency", Boolean),
        ("abnormal_pulmonary_function", Boolean),
        ("surgery_name", Text),
    ]
    .into_iter()
    .map(|(name, kind)| FeatureDef {
        name: name.to_string(),
        kind,
    })
    .collect();
    let levels: Vec<String> = LEVELS.iter().map(|s| s.to_string()).collect();
    let mut orders = BTreeMap::new();
    orders.insert("asa_grade".to_string(), levels.clone());
    orders.insert("surgery_level".to_string(), levels);
    FeatureSchema::new(
        features,
        orders,
        vec!["department".into(), "surgery_name".into(), "surgery_level".into()],
        crate::schema::DEFAULT_DURATION_COLUMN.into(),
        crate::schema::DEFAULT_ID_COLUMN.into(),
    )
    .expect("built-in schema is valid")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

/// Generates `spec.n_cases` cases; a pure function of `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<CaseSet, SpecError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_share: f64 = spec.departments.iter().map(|d| d.share).sum();

    let mut cases = Vec::with_capacity(spec.n_cases);
    let mut log_durations = Vec::with_capacity(spec.n_cases);
    for i in 0..spec.n_cases {
        let mut pick = rng.random::<f64>() * total_share;
        let dept = spec
            .departments
            .iter()
            .find(|d| {
                pick -= d.share;
                pick < 0.0
            })
            .unwrap_or_else(|| spec.departments.last().unwrap());
        let proc_ = &dept.procedures[rng.random_range(0..dept.procedures.len())];

        let level = {
            let u: f64 = rng.random();
            let shift: i64 = if u < 0.75 { 0 } else if u < 0.875 { -1 } else { 1 };
            (proc_.level as i64 + shift).clamp(0, 3) as usize
        };
        let complexity = normal(&mut rng);
        let emergency = rng.random::<f64>() < spec.emergency_rate;
        let procedure_scale = (dept.effect + proc_.effect).exp();

        let age = (52.0 + 11.0 * (0.9 * complexity + 0.44 * normal(&mut rng))).clamp(18.0, 95.0);
        let bmi = 25.0 + 4.0 * (0.9 * complexity + 0.44 * normal(&mut rng));
        let comorbidity = (2.0 + 1.5 * (0.9 * complexity + 0.44 * normal(&mut rng))).round().max(0.0);
        let asa = match 0.9 * complexity + 0.44 * normal(&mut rng) {
            c if c < -0.8 => 0,
            c if c < 0.4 => 1,
            c if c < 1.4 => 2,
            _ => 3,
        };
        let rvu = 12.0 * procedure_scale * (1.0 + 0.05 * normal(&mut rng));
        let blood_loss = 60.0
            * procedure_scale.powf(1.5)
            * (1.0 + 0.3 * (level as f64 - proc_.level as f64))
            * (0.2 * normal(&mut rng)).exp();
        let hemoglobin = 13.5 - 1.5 * (0.9 * complexity + 0.44 * normal(&mut rng));
        let heart_rate = 76.0 + 10.0 * (0.9 * complexity + 0.44 * normal(&mut rng));
        let platelets = 250.0 + 55.0 * normal(&mut rng);
        let sodium = 140.0 + 2.5 * normal(&mut rng);
        let potassium = 4.2 + 0.4 * normal(&mut rng);
        let white_cells = 7.0 + 1.8 * normal(&mut rng);
        let glucose = 5.6 + 0.9 * normal(&mut rng);
        let creatinine = 0.9 + 0.2 * (0.9 * complexity + 0.44 * normal(&mut rng));
        let pulmonary = rng.random::<f64>() < 1.0 / (1.0 + (-(complexity - 1.5) * 2.0).exp());
        let male = rng.random::<bool>();
        let anesthesia = if rng.random::<f64>() < 0.85 {
            proc_.anesthesia.clone()
        } else {
            ["general", "intravenous", "regional", "local"][rng.random_range(0..4)].to_string()
        };
        let bmi_missing = rng.random::<f64>() < spec.missing_rate;
        let hb_missing = rng.random::<f64>() < spec.missing_rate;

        let log_d = dept.effect
            + proc_.effect
            + spec.level_effect * (level as f64 - proc_.level as f64)
            + spec.complexity_effect * complexity
            + if emergency { spec.emergency_effect } else { 0.0 }
            + spec.noise_sd * normal(&mut rng);
        log_durations.push(log_d);

        let yes_no = |b: bool| Value::Text(if b { "yes" } else { "no" }.into());
        let num = |x: f64, d: i32| Value::Number(round_to(x, d));
        let case = SurgicalCase::new(format!("S{:06}", i + 1))
            .with("age", num(age, 0))
            .with("bmi", if bmi_missing { Value::Missing } else { num(bmi, 1) })
            .with("comorbidity_index", num(comorbidity, 0))
            .with("procedure_rvu", num(rvu, 2))
            .with("expected_blood_loss_ml", num(blood_loss, 0))
            .with("hemoglobin", if hb_missing { Value::Missing } else { num(hemoglobin, 1) })
            .with("heart_rate", num(heart_rate, 0))
            .with("platelet_count", num(platelets, 0))
            .with("creatinine", num(creatinine, 2))
            .with("sodium", num(sodium, 0))
            .with("potassium", num(potassium, 1))
            .with("white_cell_count", num(white_cells, 1))
            .with("glucose", num(glucose, 1))
            .with("asa_grade", Value::Text(LEVELS[asa].into()))
            .with("surgery_level", Value::Text(LEVELS[level].into()))
            .with("department", Value::Text(dept.name.clone()))
            .with("gender", Value::Text(if male { "M" } else { "F" }.into()))
            .with("anesthesia_type", Value::Text(anesthesia))
            .with("emergency", yes_no(emergency))
            .with("abnormal_pulmonary_function", yes_no(pulmonary))
            .with("surgery_name", Value::Text(proc_.name.clone()));
        cases.push(case);
    }

    let raw: Vec<f64> = log_durations.iter().map(|x| x.exp()).collect();
    let m = crate::stats::mean(&raw);
    let sd = crate::stats::variance(&raw).sqrt();
    for (case, r) in cases.iter_mut().zip(raw) {
        let z = if sd > 0.0 { (r - m) / sd } else { 0.0 };
        let minutes = (spec.target_mean + spec.target_sd * z)
            .round()
            .clamp(spec.min_minutes, spec.max_minutes);
        case.duration_min = Some(minutes);
    }

    Ok(CaseSet {
        schema: synthetic_schema(),
        cases,
    })
}

/// Shuffles with a seeded generator and cuts into train/validation/test.
/// Train and validation sizes are rounded; test takes the remainder. Each
/// part keeps the input order of its members.
pub fn split(
    cs: &CaseSet,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(CaseSet, CaseSet, CaseSet), SpecError> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(SpecError::Ratios("every ratio must be positive".into()));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(SpecError::Ratios(format!("ratios sum to {}, not 1", a + b + c)));
    }
    let n = cs.len();
    let n_train = ((n as f64) * a).round() as usize;
    let n_val = (((n as f64) * b).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        CaseSet {
            schema: cs.schema.clone(),
            cases: idx.into_iter().map(|i| cs.cases[i].clone()).collect(),
        }
    };
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}
