//! Metrics, batch experiments and ablation grids.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::AggregationStrategy;
use crate::error::{Error, Result};
use crate::llm::AuditEntry;
use crate::pipeline::{Artifacts, CasePrediction, CaseTiming, Pipeline, PipelineConfig};
use crate::schema::CaseSet;
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("need at least 2 scored cases, got {0}")]
    TooFewSamples(usize),
    #[error("true durations must be positive, got {0}")]
    NonPositiveTruth(f64),
    #[error("unknown ablation axis '{0}'")]
    UnknownAxis(String),
    #[error("bad value '{value}' for axis {axis}")]
    BadAxisValue { axis: String, value: String },
}

/// Regression metrics over `m` scored cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae_min: f64,
    pub rmse_min: f64,
    /// Against the mean of the observed durations. When every observed
    /// duration is equal, 1 for a perfect predictor and 0 otherwise.
    pub r2: f64,
    pub mape_pct: f64,
    pub m: usize,
}

/// `pairs` are `(observed, predicted)`.
pub fn compute_metrics(pairs: &[(f64, f64)]) -> Result<Metrics, EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::TooFewSamples(pairs.len()));
    }
    if let Some(&(y, _)) = pairs.iter().find(|(y, _)| !(*y > 0.0)) {
        return Err(EvalError::NonPositiveTruth(y));
    }
    let m = pairs.len() as f64;
    let ys: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let y_bar = stats::mean(&ys);
    let mae = pairs.iter().map(|(y, p)| (y - p).abs()).sum::<f64>() / m;
    let ss_res: f64 = pairs.iter().map(|(y, p)| (y - p).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - y_bar).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    let mape = pairs.iter().map(|(y, p)| 100.0 * (y - p).abs() / y).sum::<f64>() / m;
    Ok(Metrics {
        mae_min: mae,
        rmse_min: (ss_res / m).sqrt(),
        r2,
        mape_pct: mape,
        m: pairs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub id: String,
    pub error: String,
}

/// Outcome of one configuration over a test set.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub label: String,
    pub config: PipelineConfig,
    pub metrics: Metrics,
    /// Test order, successful cases only.
    pub predictions: Vec<CasePrediction>,
    pub failures: Vec<CaseFailure>,
    /// Aligned with `predictions`.
    pub timings: Vec<CaseTiming>,
    /// Aligned with `predictions`.
    pub audit: Vec<AuditEntry>,
}

impl ExperimentReport {
    pub fn failed(&self) -> usize {
        self.failures.len()
    }
}

/// Predicts every test case with a pool of `concurrency_limit` workers.
/// Output order follows the test set regardless of scheduling. Cases whose
/// pipeline fails are excluded from metrics and listed in `failures`; an
/// unreachable backend aborts the run.
pub fn evaluate_pipeline(pipeline: &Pipeline, test: &CaseSet, label: &str) -> Result<ExperimentReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(pipeline.config().concurrency_limit)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outcomes: Vec<_> = pool.install(|| test.cases.par_iter().map(|q| pipeline.predict(q)).collect());

    let mut predictions = Vec::new();
    let mut timings = Vec::new();
    let mut audit = Vec::new();
    let mut failures = Vec::new();
    for (q, outcome) in test.cases.iter().zip(outcomes) {
        match outcome {
            Ok((p, t, a)) => {
                predictions.push(p);
                timings.push(t);
                audit.push(a);
            }
            Err(e) if e.is_backend_unreachable() => return Err(e),
            Err(e) => {
                log::warn!("case {} failed: {e}", q.id);
                failures.push(CaseFailure {
                    id: q.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let pairs: Vec<(f64, f64)> = predictions
        .iter()
        .filter_map(|p| p.y_true.map(|y| (y, p.y_hat)))
        .collect();
    let metrics = compute_metrics(&pairs)?;
    Ok(ExperimentReport {
        label: label.to_string(),
        config: pipeline.config().clone(),
        metrics,
        predictions,
        failures,
        timings,
        audit,
    })
}

/// Fits on `train` and evaluates on `test`.
pub fn run_experiment(cfg: &PipelineConfig, train: &CaseSet, test: &CaseSet) -> Result<ExperimentReport> {
    let pipeline = Pipeline::fit(train, cfg.clone())?;
    evaluate_pipeline(&pipeline, test, cfg.mode.as_str())
}

/// Predicts the training median for every test case.
pub fn global_median_baseline(train: &CaseSet, test: &CaseSet) -> Result<Metrics, EvalError> {
    let durations = train.durations();
    if durations.is_empty() {
        return Err(EvalError::TooFewSamples(0));
    }
    let median = stats::median(&durations);
    let pairs: Vec<(f64, f64)> = test.cases.iter().filter_map(|c| c.duration_min).map(|y| (y, median)).collect();
    compute_metrics(&pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    K,
    Rounds,
    Expansion,
    Strategy,
    WPrior,
    PcaOnOff,
    PriorOnOff,
    PostprocessOnOff,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 8] = [
        AblationAxis::K,
        AblationAxis::Rounds,
        AblationAxis::Expansion,
        AblationAxis::Strategy,
        AblationAxis::WPrior,
        AblationAxis::PcaOnOff,
        AblationAxis::PriorOnOff,
        AblationAxis::PostprocessOnOff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::K => "k",
            AblationAxis::Rounds => "rounds",
            AblationAxis::Expansion => "expansion",
            AblationAxis::Strategy => "strategy",
            AblationAxis::WPrior => "w_prior",
            AblationAxis::PcaOnOff => "pca_on_off",
            AblationAxis::PriorOnOff => "prior_on_off",
            AblationAxis::PostprocessOnOff => "postprocess_on_off",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::K => &["3", "5", "8", "10"],
            AblationAxis::Rounds => &["1", "3", "5", "7"],
            AblationAxis::Expansion => &["1", "5", "10", "20"],
            AblationAxis::Strategy => &["bayesian", "mean", "median", "majority_vote", "quantile_average"],
            AblationAxis::WPrior => &["0.3", "0.6", "0.9", "1.2", "1.5"],
            AblationAxis::PcaOnOff | AblationAxis::PriorOnOff | AblationAxis::PostprocessOnOff => &["on", "off"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &PipelineConfig, value: &str) -> Result<PipelineConfig, EvalError> {
        let bad = || EvalError::BadAxisValue {
            axis: self.as_str().to_string(),
            value: value.to_string(),
        };
        let positive = || value.parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(bad);
        let switch = || match value {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            _ => Err(bad()),
        };
        let mut cfg = base.clone();
        match self {
            AblationAxis::K => cfg.k = positive()?,
            AblationAxis::Rounds => cfg.rounds = positive()?,
            AblationAxis::Expansion => cfg.expansion = positive()?,
            AblationAxis::Strategy => cfg.strategy = AggregationStrategy::from_str(value).map_err(|_| bad())?,
            AblationAxis::WPrior => {
                cfg.w_prior = value.parse::<f64>().ok().filter(|w| w.is_finite() && *w >= 0.0).ok_or_else(bad)?
            }
            AblationAxis::PcaOnOff => cfg.use_pca = switch()?,
            AblationAxis::PriorOnOff => cfg.use_prior = switch()?,
            AblationAxis::PostprocessOnOff => cfg.use_postprocess = switch()?,
        }
        Ok(cfg)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| EvalError::UnknownAxis(s.to_string()))
    }
}

/// One report per value, all with the same seed. Artifacts are fitted once
/// per distinct build setting. Every value is validated before any run.
pub fn run_ablation_grid(
    base: &PipelineConfig,
    axis: AblationAxis,
    values: &[String],
    train: &CaseSet,
    test: &CaseSet,
) -> Result<Vec<ExperimentReport>> {
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut built: HashMap<String, Arc<Artifacts>> = HashMap::new();
    let mut reports = Vec::with_capacity(configs.len());
    for (value, cfg) in values.iter().zip(configs) {
        let fp = cfg.fingerprint(&train.schema);
        let artifacts = match built.get(&fp) {
            Some(a) => a.clone(),
            None => {
                let a = Arc::new(Artifacts::build(train, &cfg)?);
                built.insert(fp, a.clone());
                a
            }
        };
        let pipeline = Pipeline::new(artifacts, cfg)?;
        reports.push(evaluate_pipeline(&pipeline, test, &format!("{axis}={value}"))?);
    }
    Ok(reports)
}

const METRICS_HEADER: [&str; 17] = [
    "label",
    "mode",
    "k",
    "expansion",
    "rounds",
    "strategy",
    "w_prior",
    "pca",
    "prior",
    "postprocess",
    "seed",
    "m",
    "failed",
    "mae_min",
    "rmse_min",
    "r2",
    "mape_pct",
];

/// One row per report.
pub fn write_metrics_csv<W: Write>(reports: &[ExperimentReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in reports {
        let c = &r.config;
        let on = |b: bool| if b { "on" } else { "off" }.to_string();
        w.write_record([
            r.label.clone(),
            c.mode.to_string(),
            c.k.to_string(),
            c.expansion.to_string(),
            c.rounds.to_string(),
            c.strategy.to_string(),
            c.w_prior.to_string(),
            on(c.use_pca),
            on(c.use_prior),
            on(c.use_postprocess),
            c.seed.to_string(),
            r.metrics.m.to_string(),
            r.failed().to_string(),
            format!("{:.6}", r.metrics.mae_min),
            format!("{:.6}", r.metrics.rmse_min),
            format!("{:.6}", r.metrics.r2),
            format!("{:.6}", r.metrics.mape_pct),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per case: predictions, then failures.
pub fn write_predictions_jsonl<W: Write>(report: &ExperimentReport, mut out: W) -> Result<()> {
    for p in &report.predictions {
        writeln!(out, "{}", serde_json::to_string(p).expect("prediction serializes"))?;
    }
    for f in &report.failures {
        let line = serde_json::json!({ "id": f.id, "failed": true, "error": f.error });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn write_audit_jsonl<W: Write>(report: &ExperimentReport, mut out: W) -> Result<()> {
    for a in &report.audit {
        writeln!(out, "{}", serde_json::to_string(a).expect("audit entry serializes"))?;
    }
    Ok(())
}

/// Per-case wall-clock timings; kept apart from metrics so those stay
/// reproducible.
pub fn write_timings_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["id", "retrieval_ms", "generation_ms"]).map_err(io)?;
    for (p, t) in report.predictions.iter().zip(&report.timings) {
        w.write_record([p.id.clone(), format!("{:.3}", t.retrieval_ms), format!("{:.3}", t.generation_ms)])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle(pairs: &[(f64, f64)]) -> (f64, f64, f64, f64) {
        let n = pairs.len() as f64;
        let mut abs = 0.0;
        let mut sq = 0.0;
        let mut pct = 0.0;
        let mut sum_y = 0.0;
        for &(y, p) in pairs {
            abs += (y - p).abs();
            sq += (y - p) * (y - p);
            pct += ((y - p) / y).abs();
            sum_y += y;
        }
        let mean = sum_y / n;
        let mut tot = 0.0;
        for &(y, _) in pairs {
            tot += (y - mean) * (y - mean);
        }
        (abs / n, (sq / n).sqrt(), 1.0 - sq / tot, 100.0 * pct / n)
    }

    #[test]
    fn worked_example() {
        let m = compute_metrics(&[(100.0, 110.0), (200.0, 190.0)]).unwrap();
        assert_eq!(m.mae_min, 10.0);
        assert_eq!(m.rmse_min, 10.0);
        assert_eq!(m.mape_pct, 7.5);
        assert_eq!(m.r2, 0.96);
    }

    #[test]
    fn edge_cases() {
        let perfect = compute_metrics(&[(100.0, 100.0), (200.0, 200.0)]).unwrap();
        assert_eq!((perfect.mae_min, perfect.rmse_min, perfect.mape_pct, perfect.r2), (0.0, 0.0, 0.0, 1.0));
        let mean_pred = compute_metrics(&[(100.0, 150.0), (200.0, 150.0)]).unwrap();
        assert_eq!(mean_pred.r2, 0.0);
        assert_eq!(compute_metrics(&[]), Err(EvalError::TooFewSamples(0)));
        assert_eq!(compute_metrics(&[(1.0, 1.0)]), Err(EvalError::TooFewSamples(1)));
        assert_eq!(compute_metrics(&[(0.0, 1.0), (2.0, 2.0)]), Err(EvalError::NonPositiveTruth(0.0)));
        let flat = compute_metrics(&[(5.0, 5.0), (5.0, 6.0)]).unwrap();
        assert_eq!(flat.r2, 0.0);
    }

    #[test]
    fn axis_values() {
        let base = PipelineConfig::default();
        assert_eq!(AblationAxis::K.apply(&base, "3").unwrap().k, 3);
        assert!(!AblationAxis::PcaOnOff.apply(&base, "off").unwrap().use_pca);
        assert_eq!(
            AblationAxis::Strategy.apply(&base, "median").unwrap().strategy,
            AggregationStrategy::Median
        );
        assert!(matches!(AblationAxis::K.apply(&base, "0"), Err(EvalError::BadAxisValue { .. })));
        assert!(matches!(AblationAxis::WPrior.apply(&base, "-1"), Err(EvalError::BadAxisValue { .. })));
        assert!(matches!(AblationAxis::PriorOnOff.apply(&base, "maybe"), Err(EvalError::BadAxisValue { .. })));
        assert!(matches!("depth".parse::<AblationAxis>(), Err(EvalError::UnknownAxis(_))));
        for a in AblationAxis::ALL {
            assert_eq!(a.as_str().parse::<AblationAxis>().unwrap(), a);
            for v in a.default_values() {
                a.apply(&base, &v).unwrap();
            }
        }
    }

    proptest! {
        #[test]
        fn matches_loop_oracle(pairs in prop::collection::vec((1.0f64..900.0, 0.0f64..900.0), 2..40)) {
            prop_assume!(pairs.iter().any(|p| p.0 != pairs[0].0));
            let m = compute_metrics(&pairs).unwrap();
            let (mae, rmse, r2, mape) = oracle(&pairs);
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * b.abs().max(1.0);
            prop_assert!(close(m.mae_min, mae));
            prop_assert!(close(m.rmse_min, rmse));
            prop_assert!(close(m.r2, r2));
            prop_assert!(close(m.mape_pct, mape));
            prop_assert!(m.rmse_min >= m.mae_min - 1e-12);
            prop_assert!(m.r2 <= 1.0);
        }
    }
}
