//! Stratum-level duration statistics used both as prompt context and as the
//! prior of the Bayesian aggregation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::schema::{CaseSet, SurgicalCase};
use crate::stats;
use crate::strata::StratumLadder;

pub const DEFAULT_MIN_COHORT: usize = 5;
/// Cohort size at which calibrated prior strength stops growing.
pub const CALIBRATION_COHORT: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticalPrior {
    pub median_min: f64,
    pub mean_min: f64,
    pub range_min: (f64, f64),
    pub iqr_min: (f64, f64),
    /// Population variance, minutes².
    pub variance_min2: f64,
    pub cohort_size: usize,
    /// Ladder level of the stratum; `ladder.unfiltered_level()` for GLOBAL.
    pub level: usize,
    /// e.g. `department=Urology, surgery_name=cystoscopy` or `GLOBAL`.
    pub stratum: String,
}

impl StatisticalPrior {
    pub fn from_durations(durations: &[f64], level: usize, stratum: String) -> Self {
        let s = stats::sorted(durations);
        StatisticalPrior {
            median_min: stats::quantile_sorted(&s, 0.5),
            mean_min: stats::mean(&s),
            range_min: (s[0], s[s.len() - 1]),
            iqr_min: (stats::quantile_sorted(&s, 0.25), stats::quantile_sorted(&s, 0.75)),
            variance_min2: stats::variance(&s),
            cohort_size: s.len(),
            level,
            stratum,
        }
    }

    pub fn is_global(&self) -> bool {
        self.stratum == "GLOBAL"
    }
}

/// Direct scan over the training set: the most specific ladder tier holding
/// at least `min_cohort` cases with durations, else the whole set.
///
/// Panics if `train` holds no durations.
pub fn compute_prior(
    query: &SurgicalCase,
    train: &CaseSet,
    min_cohort: usize,
    ladder: &StratumLadder,
) -> StatisticalPrior {
    let min_cohort = min_cohort.max(1);
    for level in 0..ladder.tiers().len() {
        if ladder.key(query, level).is_none() {
            continue;
        }
        let cohort: Vec<f64> = train
            .cases
            .iter()
            .filter(|c| ladder.matches(query, c, level))
            .filter_map(|c| c.duration_min)
            .collect();
        if cohort.len() >= min_cohort {
            return StatisticalPrior::from_durations(&cohort, level, ladder.describe(query, level));
        }
    }
    let all = train.durations();
    assert!(!all.is_empty(), "prior needs at least one training duration");
    StatisticalPrior::from_durations(&all, ladder.unfiltered_level(), "GLOBAL".into())
}

/// Precomputed durations per stratum key; answers exactly like
/// [`compute_prior`] without scanning the training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumCache {
    ladder: StratumLadder,
    min_cohort: usize,
    /// One map per ladder tier, keyed by the joined attribute values.
    strata: Vec<HashMap<String, Vec<f64>>>,
    global: Vec<f64>,
}

fn join_key(parts: &[String]) -> String {
    parts.join("\u{1f}")
}

impl StratumCache {
    pub fn build(train: &CaseSet, ladder: &StratumLadder, min_cohort: usize) -> Self {
        let mut strata = vec![HashMap::<String, Vec<f64>>::new(); ladder.tiers().len()];
        let mut global = Vec::new();
        for c in &train.cases {
            let Some(d) = c.duration_min else { continue };
            global.push(d);
            for (level, map) in strata.iter_mut().enumerate() {
                if let Some(key) = ladder.key(c, level) {
                    map.entry(join_key(&key)).or_default().push(d);
                }
            }
        }
        StratumCache {
            ladder: ladder.clone(),
            min_cohort: min_cohort.max(1),
            strata,
            global,
        }
    }

    pub fn ladder(&self) -> &StratumLadder {
        &self.ladder
    }

    pub fn min_cohort(&self) -> usize {
        self.min_cohort
    }

    pub fn global_durations(&self) -> &[f64] {
        &self.global
    }

    pub fn lookup(&self, query: &SurgicalCase) -> StatisticalPrior {
        for (level, map) in self.strata.iter().enumerate() {
            let Some(key) = self.ladder.key(query, level) else { continue };
            if let Some(d) = map.get(&join_key(&key)) {
                if d.len() >= self.min_cohort {
                    return StatisticalPrior::from_durations(d, level, self.ladder.describe(query, level));
                }
            }
        }
        StatisticalPrior::from_durations(&self.global, self.ladder.unfiltered_level(), "GLOBAL".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorStrengthMode {
    #[default]
    Fixed,
    Calibrated,
}

/// Prior weight for Bayesian averaging.
///
/// `Fixed` returns `base`. `Calibrated` scales it by
/// `min(1, cohort/30) / (1 + variance/median²)`, which grows with cohort
/// size and shrinks with relative dispersion; the result stays in `[0, base]`.
pub fn prior_strength(prior: &StatisticalPrior, base: f64, mode: PriorStrengthMode) -> f64 {
    match mode {
        PriorStrengthMode::Fixed => base,
        PriorStrengthMode::Calibrated => {
            let size = (prior.cohort_size as f64 / CALIBRATION_COHORT).min(1.0);
            let rel_var = prior.variance_min2 / (prior.median_min * prior.median_min);
            base * size / (1.0 + rel_var)
        }
    }
}
