//! Combining multi-round predictions into one estimate.
//!
//! The default strategy shrinks the sample mean of the rounds toward the
//! prior median:
//!
//! ```text
//! estimate = (w·prior + n·mean) / (w + n)
//! ```
//!
//! where `n` counts retained rounds. The other strategies ignore the prior.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

/// Width of the bins used by majority voting, in minutes.
pub const VOTE_BIN: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("no predictions to aggregate")]
    EmptyEnsemble,
    #[error("prior weight must be finite and non-negative, got {0}")]
    BadWeight(f64),
    #[error("a positive prior weight needs a prior")]
    MissingPrior,
    #[error("unknown aggregation strategy '{0}'")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    #[default]
    Bayesian,
    Mean,
    Median,
    MajorityVote,
    QuantileAverage,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 5] = [
        AggregationStrategy::Bayesian,
        AggregationStrategy::Mean,
        AggregationStrategy::Median,
        AggregationStrategy::MajorityVote,
        AggregationStrategy::QuantileAverage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationStrategy::Bayesian => "bayesian",
            AggregationStrategy::Mean => "mean",
            AggregationStrategy::Median => "median",
            AggregationStrategy::MajorityVote => "majority_vote",
            AggregationStrategy::QuantileAverage => "quantile_average",
        }
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationStrategy {
    type Err = AggregationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| AggregationError::UnknownStrategy(s.to_string()))
    }
}

/// Bayesian average of the rounds with the prior. With `w = 0` this is the
/// plain mean.
pub fn bayesian_average(values: &[f64], prior: Option<f64>, w: f64) -> Result<f64, AggregationError> {
    if values.is_empty() {
        return Err(AggregationError::EmptyEnsemble);
    }
    if !(w.is_finite() && w >= 0.0) {
        return Err(AggregationError::BadWeight(w));
    }
    let n = values.len() as f64;
    let mean = stats::mean(values);
    match prior {
        _ if w == 0.0 => Ok(mean),
        None => Err(AggregationError::MissingPrior),
        Some(mu) => Ok((w * mu + n * mean) / (w + n)),
    }
}

/// Rounds each value to the nearest bin, picks the most populated bin and
/// returns the mean of the raw values inside it. Ties go to the bin closest
/// to the overall mean, then to the lower bin.
pub fn majority_vote(values: &[f64]) -> Result<f64, AggregationError> {
    if values.is_empty() {
        return Err(AggregationError::EmptyEnsemble);
    }
    let bin = |v: f64| (v / VOTE_BIN).round() as i64;
    let mut bins: Vec<i64> = values.iter().map(|&v| bin(v)).collect();
    bins.sort_unstable();
    bins.dedup();
    let mean = stats::mean(values);
    let count = |b: i64| values.iter().filter(|&&v| bin(v) == b).count();
    let winner = bins
        .iter()
        .copied()
        .max_by(|&a, &b| {
            count(a)
                .cmp(&count(b))
                .then_with(|| {
                    let da = (a as f64 * VOTE_BIN - mean).abs();
                    let db = (b as f64 * VOTE_BIN - mean).abs();
                    db.total_cmp(&da)
                })
                .then_with(|| b.cmp(&a))
        })
        .expect("non-empty");
    let members: Vec<f64> = values.iter().copied().filter(|&v| bin(v) == winner).collect();
    Ok(stats::mean(&members))
}

/// Mean of the values inside the interquartile range; the median if that
/// range holds no value.
pub fn quantile_average(values: &[f64]) -> Result<f64, AggregationError> {
    if values.is_empty() {
        return Err(AggregationError::EmptyEnsemble);
    }
    let s = stats::sorted(values);
    let (q1, q3) = (stats::quantile_sorted(&s, 0.25), stats::quantile_sorted(&s, 0.75));
    let inner: Vec<f64> = s.iter().copied().filter(|&v| v >= q1 && v <= q3).collect();
    Ok(if inner.is_empty() {
        stats::quantile_sorted(&s, 0.5)
    } else {
        stats::mean(&inner)
    })
}

pub fn aggregate(
    values: &[f64],
    strategy: AggregationStrategy,
    prior: Option<f64>,
    w: f64,
) -> Result<f64, AggregationError> {
    if values.is_empty() {
        return Err(AggregationError::EmptyEnsemble);
    }
    match strategy {
        AggregationStrategy::Bayesian => bayesian_average(values, prior, w),
        AggregationStrategy::Mean => Ok(stats::mean(values)),
        AggregationStrategy::Median => Ok(stats::median(values)),
        AggregationStrategy::MajorityVote => majority_vote(values),
        AggregationStrategy::QuantileAverage => quantile_average(values),
    }
}

/// A fused estimate with the quantities that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEstimate {
    pub y_hat_min: f64,
    pub strategy: AggregationStrategy,
    pub ensemble_mean: f64,
    pub prior_mean: Option<f64>,
    /// Zero for strategies that ignore the prior.
    pub prior_weight: f64,
    pub effective_n: usize,
    /// `prior_weight + effective_n`.
    pub effective_sample_size: f64,
}

pub fn estimate(
    values: &[f64],
    strategy: AggregationStrategy,
    prior: Option<f64>,
    w: f64,
) -> Result<AggregateEstimate, AggregationError> {
    let y_hat_min = aggregate(values, strategy, prior, w)?;
    let prior_weight = if strategy == AggregationStrategy::Bayesian && prior.is_some() { w } else { 0.0 };
    Ok(AggregateEstimate {
        y_hat_min,
        strategy,
        ensemble_mean: stats::mean(values),
        prior_mean: prior,
        prior_weight,
        effective_n: values.len(),
        effective_sample_size: prior_weight + values.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bayesian_examples() {
        let v = [120.0, 130.0, 125.0, 135.0, 140.0];
        let b = bayesian_average(&v, Some(110.0), 1.0).unwrap();
        assert!((b - 760.0 / 6.0).abs() < 1e-12);
        assert_eq!(bayesian_average(&v, None, 0.0).unwrap(), 130.0);
        assert_eq!(bayesian_average(&[100.0], Some(200.0), 1.0).unwrap(), 150.0);
        let worked = bayesian_average(&[130.0; 5], Some(120.0), 0.9).unwrap();
        assert!((worked - 128.4745762711864).abs() < 1e-9);
        assert_eq!(bayesian_average(&[100.0, 100.0], Some(100.0), 3.7).unwrap(), 100.0);
        assert_eq!(bayesian_average(&v, None, 1.0), Err(AggregationError::MissingPrior));
        assert_eq!(bayesian_average(&v, Some(1.0), -1.0), Err(AggregationError::BadWeight(-1.0)));
        assert_eq!(bayesian_average(&[], Some(1.0), 1.0), Err(AggregationError::EmptyEnsemble));
    }

    #[test]
    fn other_strategies() {
        let v = [100.0, 102.0, 150.0, 98.0, 200.0];
        assert_eq!(aggregate(&v, AggregationStrategy::Median, None, 0.0).unwrap(), 102.0);
        assert_eq!(aggregate(&v, AggregationStrategy::Mean, None, 0.0).unwrap(), 130.0);
        assert_eq!(majority_vote(&v).unwrap(), 100.0);
        // quartiles 100 and 150: keeps 100, 102, 150
        assert!((quantile_average(&v).unwrap() - 352.0 / 3.0).abs() < 1e-12);
        assert_eq!(quantile_average(&[7.0]).unwrap(), 7.0);
        assert_eq!(quantile_average(&[90.0, 100.0, 110.0, 120.0, 300.0]).unwrap(), 110.0);
        assert_eq!(majority_vote(&[100.0, 100.0, 105.0, 200.0, 210.0]).unwrap(), 100.0);
        assert_eq!(aggregate(&[100.0, 110.0, 120.0], AggregationStrategy::Mean, None, 0.0).unwrap(), 110.0);
    }

    #[test]
    fn estimate_records_inputs() {
        let e = estimate(&[130.0; 5], AggregationStrategy::Bayesian, Some(120.0), 0.9).unwrap();
        assert_eq!(e.effective_n, 5);
        assert!((e.effective_sample_size - 5.9).abs() < 1e-12);
        assert_eq!(e.ensemble_mean, 130.0);
        let m = estimate(&[130.0; 5], AggregationStrategy::Median, Some(120.0), 0.9).unwrap();
        assert_eq!(m.prior_weight, 0.0);
        assert_eq!(m.y_hat_min, 130.0);
    }

    #[test]
    fn majority_tie_goes_toward_mean() {
        // bins 100 and 200 both hold one value; mean 150 is equidistant,
        // so the lower bin wins.
        assert_eq!(majority_vote(&[100.0, 200.0]).unwrap(), 100.0);
        assert_eq!(majority_vote(&[100.0, 120.0, 200.0]).unwrap(), 120.0);
    }

    #[test]
    fn parse_names() {
        for s in AggregationStrategy::ALL {
            assert_eq!(s.as_str().parse::<AggregationStrategy>().unwrap(), s);
        }
        assert!("vote".parse::<AggregationStrategy>().is_err());
    }

    proptest! {
        #[test]
        fn estimates_stay_within_range(
            v in prop::collection::vec(1.0f64..810.0, 1..12),
            prior in 1.0f64..810.0,
            w in 0.0f64..10.0,
        ) {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for s in AggregationStrategy::ALL {
                let x = aggregate(&v, s, Some(prior), w).unwrap();
                if s == AggregationStrategy::Bayesian {
                    prop_assert!(x >= lo.min(prior) - 1e-9 && x <= hi.max(prior) + 1e-9);
                } else {
                    prop_assert!(x >= lo - 1e-9 && x <= hi + 1e-9, "{s}: {x} outside [{lo}, {hi}]");
                }
            }
        }

        #[test]
        fn permutation_invariant(
            v in prop::collection::vec(1.0f64..810.0, 1..12),
            seed in any::<u64>(),
            prior in 1.0f64..810.0,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = v.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            for s in AggregationStrategy::ALL {
                let a = aggregate(&v, s, Some(prior), 1.0).unwrap();
                let b = aggregate(&shuffled, s, Some(prior), 1.0).unwrap();
                prop_assert!((a - b).abs() < 1e-9, "{s}: {a} vs {b}");
            }
        }

        #[test]
        fn bayesian_limits(v in prop::collection::vec(1.0f64..810.0, 1..8), prior in 1.0f64..810.0) {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            prop_assert!((bayesian_average(&v, Some(prior), 0.0).unwrap() - mean).abs() < 1e-9);
            let heavy = bayesian_average(&v, Some(prior), 1e12).unwrap();
            prop_assert!((heavy - prior).abs() < 1e-6);
        }
    }
}
