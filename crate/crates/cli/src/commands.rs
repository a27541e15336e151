use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use durcast_core::evaluation::{write_audit_jsonl, write_metrics_csv, write_predictions_jsonl, write_timings_csv};
use durcast_core::prompt::{PromptError, PromptMode};
use durcast_core::schema::load_schema_file;
use durcast_core::{
    generate_synthetic, global_median_baseline, ingest_csv, run_ablation_grid, run_experiment, split, AblationAxis,
    Artifacts, BackendSpec, CasePrediction, ComponentSelection, FeatureKind, FeatureSchema, InferenceMode, Pipeline,
    PipelineConfig, SurgicalCase, SyntheticSpec, Value,
};

use crate::args::{AblateArgs, BackendKind, BuildArgs, EvaluateArgs, GenerateArgs, PredictArgs, RunArgs};
use crate::UsageError;

/// Settings saved next to built artifacts so `predict` reproduces them.
const CONFIG_FILE: &str = "config.toml";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Explicit flags override `--config`, which overrides `base`.
fn resolve(run: &RunArgs, base: PipelineConfig) -> Result<PipelineConfig> {
    let mut cfg = match &run.config {
        Some(p) => read_config(p)?,
        None => base,
    };
    if let Some(v) = run.seed {
        cfg.seed = v;
    }
    if let Some(m) = &run.mode {
        cfg.mode = m.parse().map_err(|_| usage(format!("unknown mode '{m}'")))?;
    }
    if let Some(k) = run.k {
        if cfg.mode == InferenceMode::ZeroShot {
            return Err(durcast_core::Error::from(PromptError::ModeArgumentMismatch {
                mode: PromptMode::ZeroShot,
                message: "takes no reference count",
            })
            .into());
        }
        cfg.k = k;
    }
    if let Some(v) = run.expansion {
        cfg.expansion = v;
    }
    if let Some(v) = run.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = run.max_retries {
        cfg.max_retries = v;
    }
    if let Some(s) = &run.strategy {
        cfg.strategy = s.parse().map_err(|_| usage(format!("unknown strategy '{s}'")))?;
    }
    if let Some(v) = run.w_prior {
        cfg.w_prior = v;
    }
    if run.no_prior {
        cfg.use_prior = false;
    }
    if run.no_postprocess {
        cfg.use_postprocess = false;
    }
    if run.no_pca {
        cfg.use_pca = false;
    }
    if let Some(n) = run.components {
        cfg.components = ComponentSelection::Fixed(n);
    }
    if let Some(c) = run.coverage {
        cfg.components = ComponentSelection::Coverage(c);
    }
    if run.strict {
        cfg.strict = true;
    }
    if let Some(v) = run.concurrency {
        cfg.concurrency_limit = v;
    }
    if let Some(t) = &run.template {
        cfg.template = Some(t.clone());
    }
    apply_backend(run, &mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_backend(run: &RunArgs, cfg: &mut PipelineConfig) -> Result<()> {
    let current_noise = match &cfg.backend {
        BackendSpec::MockEchoPrior { noise_sd } | BackendSpec::MockReferenceMean { noise_sd } => *noise_sd,
        _ => 0.0,
    };
    let noise_sd = run.noise_sd.unwrap_or(current_noise);
    match run.backend {
        Some(BackendKind::MockReferenceMean) => cfg.backend = BackendSpec::MockReferenceMean { noise_sd },
        Some(BackendKind::MockEchoPrior) => cfg.backend = BackendSpec::MockEchoPrior { noise_sd },
        Some(BackendKind::Http) => {
            let (Some(endpoint), Some(model)) = (run.endpoint.clone(), run.model.clone()) else {
                return Err(usage("--backend http needs --endpoint and --model"));
            };
            cfg.backend = BackendSpec::Http {
                endpoint,
                model,
                api_key_env: run.api_key_env.clone(),
                timeout_s: 60.0,
                max_tokens: 512,
            };
        }
        None => match &mut cfg.backend {
            BackendSpec::MockEchoPrior { noise_sd: n } | BackendSpec::MockReferenceMean { noise_sd: n } => {
                *n = noise_sd
            }
            BackendSpec::Http {
                endpoint,
                model,
                api_key_env,
                ..
            } => {
                if let Some(e) = &run.endpoint {
                    *endpoint = e.clone();
                }
                if let Some(m) = &run.model {
                    *model = m.clone();
                }
                if run.api_key_env.is_some() {
                    *api_key_env = run.api_key_env.clone();
                }
            }
            BackendSpec::MockScripted { .. } => {}
        },
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_data(schema: &Path, csv: &Path) -> Result<(FeatureSchema, durcast_core::CaseSet)> {
    let schema = load_schema_file(schema).map_err(durcast_core::Error::from)?;
    let cases = ingest_csv(csv, &schema)
        .map_err(durcast_core::Error::from)
        .with_context(|| format!("reading {}", csv.display()))?;
    Ok((schema, cases))
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec::standard(a.n, a.departments);
    let cases = generate_synthetic(&spec, a.seed).map_err(durcast_core::Error::from)?;
    let (train, val, test) =
        split(&cases, (a.split[0], a.split[1], a.split[2]), a.seed).map_err(durcast_core::Error::from)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        let path = a.out.join(format!("{name}.csv"));
        part.write_csv_file(&path).map_err(durcast_core::Error::from)?;
        println!("{}: {} cases", path.display(), part.len());
    }
    let schema_path = a.out.join("schema.toml");
    fs::write(&schema_path, cases.schema.to_toml())?;
    println!("{}", schema_path.display());
    Ok(())
}

pub fn build(a: BuildArgs) -> Result<()> {
    let (_, train) = load_data(&a.schema, &a.train)?;
    let cfg = resolve(&a.run, PipelineConfig::default())?;
    let artifacts = Artifacts::build(&train, &cfg)?;
    artifacts.save(&a.out)?;
    fs::write(a.out.join(CONFIG_FILE), toml::to_string(&cfg)?)?;
    println!(
        "built {} cases, dimension {}, fingerprint {}",
        artifacts.index.len(),
        artifacts.index.dim(),
        artifacts.fingerprint
    );
    println!("feature importance: {}", a.out.join("importance.csv").display());
    Ok(())
}

fn parse_inline(pairs: &[String], schema: &FeatureSchema) -> Result<SurgicalCase> {
    let mut case = SurgicalCase::new("query");
    for f in &schema.features {
        case.values.insert(f.name.clone(), Value::Missing);
    }
    for pair in pairs {
        let (name, raw) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("expected NAME=VALUE, got '{pair}'")))?;
        let (name, raw) = (name.trim(), raw.trim());
        if name == schema.id_column {
            case.id = raw.to_string();
            continue;
        }
        let number = || {
            raw.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| usage(format!("'{name}' needs a number, got '{raw}'")))
        };
        if name == schema.duration_column {
            case.duration_min = Some(number()?);
            continue;
        }
        let value = match schema.kind_of(name) {
            None => return Err(usage(format!("unknown feature '{name}'"))),
            Some(_) if raw.is_empty() => Value::Missing,
            Some(FeatureKind::Numerical) => Value::Number(number()?),
            Some(_) => Value::Text(raw.to_string()),
        };
        case.values.insert(name.to_string(), value);
    }
    case.conforms_to(schema).map_err(usage)?;
    Ok(case)
}

fn print_prediction(p: &CasePrediction, backend: &str) {
    println!("case {}", p.id);
    println!("mode {}, backend {backend}", p.mode);
    if !p.references.is_empty() {
        let level = p.reference_level.map_or("-".to_string(), |l| l.to_string());
        println!("references ({}, stratum level {level}):", p.references.len());
        for (i, r) in p.references.iter().enumerate() {
            println!(
                "  {:>2}  {:<12} similarity {:.6}  duration {} min",
                i + 1,
                r.id,
                r.similarity,
                r.duration_min
            );
        }
    }
    if let Some(pr) = &p.prior {
        println!(
            "prior: {} (n={}): median {:.2}, mean {:.2}, IQR [{:.2}, {:.2}], range [{:.2}, {:.2}]",
            pr.stratum,
            pr.cohort_size,
            pr.median_min,
            pr.mean_min,
            pr.iqr_min.0,
            pr.iqr_min.1,
            pr.range_min.0,
            pr.range_min.1
        );
    }
    println!("ensemble:");
    for r in &p.ensemble {
        match (r.minutes, &r.error) {
            (Some(m), _) => println!("  round {}  temperature {:.3}  -> {m:.2}", r.round + 1, r.temperature),
            (None, e) => println!(
                "  round {}  temperature {:.3}  dropped: {}",
                r.round + 1,
                r.temperature,
                e.as_deref().unwrap_or("no answer")
            ),
        }
    }
    let e = &p.estimate;
    println!(
        "estimate: {:.2} min ({}, ensemble mean {:.2}, prior weight {:.2}, effective sample size {:.2})",
        e.y_hat_min, e.strategy, e.ensemble_mean, e.prior_weight, e.effective_sample_size
    );
    if let Some(y) = p.y_true {
        println!("observed: {y} min");
    }
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let artifacts = Artifacts::load(&a.artifacts)?;
    let saved = a.artifacts.join(CONFIG_FILE);
    let base = if saved.exists() {
        read_config(&saved)?
    } else {
        PipelineConfig::default()
    };
    let cfg = resolve(&a.run, base)?;
    let schema = artifacts.schema().clone();
    let queries = match (&a.case, a.set.is_empty()) {
        (Some(path), _) => {
            ingest_csv(path, &schema)
                .map_err(durcast_core::Error::from)
                .with_context(|| format!("reading {}", path.display()))?
                .cases
        }
        (None, false) => vec![parse_inline(&a.set, &schema)?],
        (None, true) => return Err(usage("give --case FILE or at least one --set NAME=VALUE")),
    };
    let pipeline = Pipeline::new(Arc::new(artifacts), cfg)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, q) in queries.iter().enumerate() {
        let (p, _, _) = pipeline.predict(q)?;
        if a.json {
            writeln!(out, "{}", serde_json::to_string(&p)?)?;
        } else {
            if i > 0 {
                println!();
            }
            print_prediction(&p, pipeline.backend_name());
        }
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (schema, train) = load_data(&a.schema, &a.train)?;
    let test = ingest_csv(&a.test, &schema)
        .map_err(durcast_core::Error::from)
        .with_context(|| format!("reading {}", a.test.display()))?;
    let cfg = resolve(&a.run, PipelineConfig::default())?;
    let report = run_experiment(&cfg, &train, &test)?;
    fs::create_dir_all(&a.out)?;
    write_metrics_csv(std::slice::from_ref(&report), create(&a.out.join("metrics.csv"))?)?;
    let mut w = create(&a.out.join("predictions.jsonl"))?;
    write_predictions_jsonl(&report, &mut w)?;
    w.flush()?;
    let mut w = create(&a.out.join("audit.jsonl"))?;
    write_audit_jsonl(&report, &mut w)?;
    w.flush()?;
    write_timings_csv(&report, create(&a.out.join("timings.csv"))?)?;

    let m = &report.metrics;
    println!(
        "{}: m={} failed={} MAE {:.2}  RMSE {:.2}  R2 {:.4}  MAPE {:.2}%",
        report.label,
        m.m,
        report.failed(),
        m.mae_min,
        m.rmse_min,
        m.r2,
        m.mape_pct
    );
    if let Ok(b) = global_median_baseline(&train, &test) {
        println!(
            "global median baseline: MAE {:.2}  RMSE {:.2}  R2 {:.4}  MAPE {:.2}%",
            b.mae_min, b.rmse_min, b.r2, b.mape_pct
        );
    }
    println!("outputs in {}", a.out.display());
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let axis: AblationAxis = a.axis.parse().map_err(|e| usage(format!("{e}")))?;
    let (schema, train) = load_data(&a.schema, &a.train)?;
    let test = ingest_csv(&a.test, &schema)
        .map_err(durcast_core::Error::from)
        .with_context(|| format!("reading {}", a.test.display()))?;
    let base = resolve(&a.run, PipelineConfig::default())?;
    let values = if a.values.is_empty() {
        axis.default_values()
    } else {
        a.values.clone()
    };
    let reports = run_ablation_grid(&base, axis, &values, &train, &test)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(format!("ablation_{axis}.csv"));
    write_metrics_csv(&reports, create(&path)?)?;
    for r in &reports {
        println!(
            "{:<28} MAE {:>8.2}  RMSE {:>8.2}  R2 {:>7.4}  MAPE {:>6.2}%",
            r.label, r.metrics.mae_min, r.metrics.rmse_min, r.metrics.r2, r.metrics.mape_pct
        );
    }
    println!("{}", path.display());
    Ok(())
}
