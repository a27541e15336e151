//! End-to-end wiring: fitted artifacts (encoder, PCA weights, index, prior
//! cache), their on-disk form, and per-case prediction.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{estimate, AggregateEstimate, AggregationStrategy};
use crate::encoder::{self, EmbedderSpec, EncoderState, FittedEncoder};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::llm::{predict_ensemble, AuditEntry, BackendSpec, ChatBackend, EnsembleConfig, RoundRecord, MAX_MINUTES};
use crate::pca::{self, ComponentSelection, PcaModel, WeightVector};
use crate::prior::{prior_strength, PriorStrengthMode, StatisticalPrior, StratumCache, DEFAULT_MIN_COHORT};
use crate::prompt::{build_prompt, Prompt, PromptMode, PromptTemplate, DEFAULT_MAX_CHARS};
use crate::retrieval::{postprocess, FlatIndex, Reference, ReferenceSet};
use crate::schema::{CaseSet, FeatureSchema, SurgicalCase};
use crate::stats;
use crate::strata::StratumLadder;

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    ZeroShot,
    RandomFewShot,
    #[default]
    Rag,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [InferenceMode::ZeroShot, InferenceMode::RandomFewShot, InferenceMode::Rag];

    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::ZeroShot => "zero_shot",
            InferenceMode::RandomFewShot => "random_few_shot",
            InferenceMode::Rag => "rag",
        }
    }
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// Every knob of a run. Fields marked "build" shape the fitted artifacts
/// and enter the fingerprint; the rest can change between runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mode: InferenceMode,
    /// References per prompt.
    pub k: usize,
    /// Candidates retrieved per reference kept (`M = expansion · k`).
    pub expansion: usize,
    pub rounds: usize,
    pub max_retries: usize,
    pub strategy: AggregationStrategy,
    pub w_prior: f64,
    pub prior_strength: PriorStrengthMode,
    pub use_prior: bool,
    pub use_postprocess: bool,
    /// Build: principal-component weighting; uniform weights when off.
    pub use_pca: bool,
    /// Build.
    pub components: ComponentSelection,
    /// Build.
    pub min_cohort: usize,
    /// Build.
    pub embedder: EmbedderSpec,
    pub backend: BackendSpec,
    pub strict: bool,
    pub concurrency_limit: usize,
    pub max_minutes: f64,
    pub max_prompt_chars: usize,
    /// Prompt template file; the shipped default when unset.
    pub template: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            mode: InferenceMode::Rag,
            k: 8,
            expansion: 10,
            rounds: 5,
            max_retries: 2,
            strategy: AggregationStrategy::Bayesian,
            w_prior: 0.9,
            prior_strength: PriorStrengthMode::Fixed,
            use_prior: true,
            use_postprocess: true,
            use_pca: true,
            components: ComponentSelection::default(),
            min_cohort: DEFAULT_MIN_COHORT,
            embedder: EmbedderSpec::default(),
            backend: BackendSpec::default(),
            strict: false,
            concurrency_limit: 10,
            max_minutes: MAX_MINUTES,
            max_prompt_chars: DEFAULT_MAX_CHARS,
            template: None,
        }
    }
}

#[derive(Serialize)]
struct BuildKey<'a> {
    schema: String,
    use_pca: bool,
    components: &'a ComponentSelection,
    min_cohort: usize,
    embedder: &'a EmbedderSpec,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.mode != InferenceMode::ZeroShot && self.k == 0 {
            return bad(format!("k must be at least 1 in {} mode", self.mode));
        }
        if self.expansion == 0 {
            return bad("expansion must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.w_prior.is_finite() && self.w_prior >= 0.0) {
            return bad(format!("w_prior must be non-negative, got {}", self.w_prior));
        }
        if self.concurrency_limit == 0 {
            return bad("concurrency_limit must be at least 1".into());
        }
        if self.min_cohort == 0 {
            return bad("min_cohort must be at least 1".into());
        }
        if !(self.max_minutes.is_finite() && self.max_minutes >= 1.0) {
            return bad(format!("max_minutes must be at least 1, got {}", self.max_minutes));
        }
        if let ComponentSelection::Coverage(c) = self.components {
            if !(c > 0.0 && c <= 1.0) {
                return bad(format!("coverage must be in (0, 1], got {c}"));
            }
        }
        if let ComponentSelection::Fixed(0) = self.components {
            return bad("component count must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 over the schema and the build fields, hex encoded.
    pub fn fingerprint(&self, schema: &FeatureSchema) -> String {
        let key = BuildKey {
            schema: schema.to_toml(),
            use_pca: self.use_pca,
            components: &self.components,
            min_cohort: self.min_cohort,
            embedder: &self.embedder,
        };
        let bytes = serde_json::to_vec(&key).expect("build key serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig {
            rounds: self.rounds,
            max_retries: self.max_retries,
            strict: self.strict,
            max_minutes: self.max_minutes,
        }
    }

    pub fn load_template(&self) -> Result<PromptTemplate> {
        let mut t = match &self.template {
            Some(p) => PromptTemplate::load(p)?,
            None => PromptTemplate::default(),
        };
        t.max_chars = self.max_prompt_chars;
        Ok(t)
    }
}

/// Everything fitted on the training set.
#[derive(Debug)]
pub struct Artifacts {
    pub encoder: FittedEncoder,
    pub pca: Option<PcaModel>,
    pub weights: WeightVector,
    pub index: FlatIndex,
    pub priors: StratumCache,
    pub global_median: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub fingerprint: String,
    pub cases: usize,
    pub dim: usize,
    pub components_used: usize,
    pub global_median: f64,
}

pub const ENCODER_FILE: &str = "encoder.json";
pub const PCA_FILE: &str = "pca.json";
pub const WEIGHTS_FILE: &str = "weights.json";
pub const INDEX_FILE: &str = "index.bin";
pub const PRIORS_FILE: &str = "priors.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMPORTANCE_FILE: &str = "importance.csv";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| artifact_err(path, e))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| artifact_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| artifact_err(path, e))
}

fn artifact_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Artifact {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl Artifacts {
    pub fn build(train: &CaseSet, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = encoder::fit_with(train, cfg.embedder.clone())?;
        let embeddings = encoder.encode_batch(&train.cases)?;
        let (pca, weights) = if cfg.use_pca {
            let rows: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
            let model = pca::fit_pca(&rows)?;
            let k = cfg.components.resolve(&model);
            let w = pca::derive_weights(&model, k)?;
            (Some(model), w)
        } else {
            (None, WeightVector::uniform(encoder.dim()))
        };
        let entries = embeddings
            .iter()
            .zip(&train.cases)
            .map(|(e, c)| Ok((pca::apply_weights(e, &weights)?, c.clone())))
            .collect::<Result<Vec<_>>>()?;
        let index = FlatIndex::build(entries)?;
        let ladder = StratumLadder::new(&train.schema);
        let priors = StratumCache::build(train, &ladder, cfg.min_cohort);
        let global_median = stats::median(&train.durations());
        Ok(Artifacts {
            encoder,
            pca,
            weights,
            index,
            priors,
            global_median,
            fingerprint: cfg.fingerprint(&train.schema),
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        self.encoder.schema()
    }

    pub fn importance(&self) -> Result<Vec<(String, f64)>> {
        Ok(pca::feature_importance_report(&self.weights, self.encoder.layout(), self.schema())?)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: ARTIFACT_FORMAT_VERSION,
            fingerprint: self.fingerprint.clone(),
            cases: self.index.len(),
            dim: self.index.dim(),
            components_used: self.weights.k_used,
            global_median: self.global_median,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_json(&dir.join(ENCODER_FILE), self.encoder.state())?;
        write_json(&dir.join(PCA_FILE), &self.pca)?;
        write_json(&dir.join(WEIGHTS_FILE), &self.weights)?;
        self.index.save(dir.join(INDEX_FILE))?;
        write_json(&dir.join(PRIORS_FILE), &self.priors)?;
        let mut csv = Vec::new();
        pca::write_importance_csv(&self.importance()?, &mut csv)?;
        fs::write(dir.join(IMPORTANCE_FILE), csv)?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format_version != ARTIFACT_FORMAT_VERSION {
            return Err(artifact_err(
                &dir.join(MANIFEST_FILE),
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let state: EncoderState = read_json(&dir.join(ENCODER_FILE))?;
        let encoder = FittedEncoder::from_state(state);
        let pca: Option<PcaModel> = read_json(&dir.join(PCA_FILE))?;
        let weights: WeightVector = read_json(&dir.join(WEIGHTS_FILE))?;
        let index = FlatIndex::load(dir.join(INDEX_FILE))?;
        let priors: StratumCache = read_json(&dir.join(PRIORS_FILE))?;
        if index.dim() != encoder.dim() || weights.dim() != encoder.dim() {
            return Err(artifact_err(dir, "encoder, weights and index dimensions disagree"));
        }
        Ok(Artifacts {
            encoder,
            pca,
            weights,
            index,
            priors,
            global_median: manifest.global_median,
            fingerprint: manifest.fingerprint,
        })
    }
}

/// Reference as written to per-case outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub id: String,
    pub similarity: f64,
    pub duration_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub id: String,
    pub mode: InferenceMode,
    pub y_true: Option<f64>,
    pub y_hat: f64,
    pub estimate: AggregateEstimate,
    pub references: Vec<ReferenceSummary>,
    /// Ladder level the references came from, when post-processing ran.
    pub reference_level: Option<usize>,
    pub prior: Option<StatisticalPrior>,
    pub ensemble: Vec<RoundRecord>,
}

/// Wall-clock split of one prediction, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseTiming {
    pub retrieval_ms: f64,
    pub generation_ms: f64,
}

/// A prepared prompt and the context that went into it.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub prompt: Prompt,
    pub references: Option<ReferenceSet>,
    pub prior: Option<StatisticalPrior>,
}

/// Fitted artifacts plus run-time settings and a backend.
pub struct Pipeline {
    artifacts: Arc<Artifacts>,
    config: PipelineConfig,
    backend: Arc<dyn ChatBackend>,
    template: PromptTemplate,
    ladder: StratumLadder,
}

impl Pipeline {
    /// Fails with `FingerprintMismatch` if the artifacts were built under
    /// different build settings or schema.
    pub fn new(artifacts: Arc<Artifacts>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let current = config.fingerprint(artifacts.schema());
        if current != artifacts.fingerprint {
            return Err(Error::FingerprintMismatch {
                built: artifacts.fingerprint.clone(),
                current,
            });
        }
        let backend = config.backend.build(artifacts.global_median)?;
        let template = config.load_template()?;
        let ladder = StratumLadder::new(artifacts.schema());
        Ok(Pipeline {
            artifacts,
            config,
            backend,
            template,
            ladder,
        })
    }

    pub fn fit(train: &CaseSet, config: PipelineConfig) -> Result<Self> {
        let artifacts = Arc::new(Artifacts::build(train, &config)?);
        Self::new(artifacts, config)
    }

    /// Replaces the configured backend, e.g. with a test double.
    pub fn with_backend(mut self, backend: Arc<dyn ChatBackend>) -> Self {
        self.backend = backend;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn artifacts(&self) -> &Arc<Artifacts> {
        &self.artifacts
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    fn prompt_mode(&self) -> PromptMode {
        match self.config.mode {
            InferenceMode::ZeroShot => PromptMode::ZeroShot,
            InferenceMode::RandomFewShot => PromptMode::RandomFewShot,
            InferenceMode::Rag if self.config.use_prior => PromptMode::Rag,
            InferenceMode::Rag => PromptMode::RagWithoutPrior,
        }
    }

    fn random_references(&self, query: &SurgicalCase) -> Result<ReferenceSet> {
        let a = &self.artifacts;
        let emb = pca::apply_weights(&a.encoder.encode(query)?, &a.weights)?;
        let sims = a.index.similarities(&emb.vector)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &format!("few-shot/{}", query.id)));
        let k = self.config.k.min(a.index.len());
        let picked = rand::seq::index::sample(&mut rng, a.index.len(), k);
        Ok(ReferenceSet {
            references: picked
                .into_iter()
                .map(|i| Reference {
                    case: a.index.cases()[i].clone(),
                    similarity: sims[i],
                })
                .collect(),
            fallback_level: self.ladder.unfiltered_level(),
            iqr: None,
        })
    }

    fn retrieved_references(&self, query: &SurgicalCase) -> Result<ReferenceSet> {
        let a = &self.artifacts;
        let emb = pca::apply_weights(&a.encoder.encode(query)?, &a.weights)?;
        let m = self.config.k.saturating_mul(self.config.expansion);
        let candidates = a.index.retrieve(&emb, m)?;
        Ok(if self.config.use_postprocess {
            postprocess(&candidates, query, self.config.k, &self.ladder)?
        } else {
            ReferenceSet::unfiltered(&candidates, self.config.k, &self.ladder)
        })
    }

    /// Gathers references and prior for the configured mode and renders
    /// the prompt.
    pub fn prepare(&self, query: &SurgicalCase) -> Result<PreparedQuery> {
        let references = match self.config.mode {
            InferenceMode::ZeroShot => None,
            InferenceMode::RandomFewShot => Some(self.random_references(query)?),
            InferenceMode::Rag => Some(self.retrieved_references(query)?),
        };
        let prior = match (self.config.mode, self.config.use_prior) {
            (InferenceMode::Rag, true) => Some(self.artifacts.priors.lookup(query)),
            _ => None,
        };
        let prompt = build_prompt(
            query,
            references.as_ref(),
            prior.as_ref(),
            self.prompt_mode(),
            self.artifacts.schema(),
            &self.template,
        )?;
        Ok(PreparedQuery {
            prompt,
            references,
            prior,
        })
    }

    pub fn predict(&self, query: &SurgicalCase) -> Result<(CasePrediction, CaseTiming, AuditEntry)> {
        let t0 = Instant::now();
        let prepared = self.prepare(query)?;
        let t1 = Instant::now();
        let seed = derive_seed(self.config.seed, &query.id);
        let ensemble = predict_ensemble(&prepared.prompt, self.backend.as_ref(), &self.config.ensemble(), seed)?;
        let t2 = Instant::now();

        let (prior_mean, w) = match &prepared.prior {
            Some(p) => (
                Some(p.median_min),
                prior_strength(p, self.config.w_prior, self.config.prior_strength),
            ),
            None => (None, 0.0),
        };
        let est = estimate(&ensemble.values(), self.config.strategy, prior_mean, w)?;
        let prediction = CasePrediction {
            id: query.id.clone(),
            mode: self.config.mode,
            y_true: query.duration_min,
            y_hat: est.y_hat_min,
            estimate: est,
            references: prepared
                .references
                .as_ref()
                .map(|r| {
                    r.references
                        .iter()
                        .map(|x| ReferenceSummary {
                            id: x.case.id.clone(),
                            similarity: x.similarity,
                            duration_min: x.duration(),
                        })
                        .collect()
                })
                .unwrap_or_default(),
            reference_level: prepared.references.as_ref().map(|r| r.fallback_level),
            prior: prepared.prior.clone(),
            ensemble: ensemble.rounds.clone(),
        };
        let timing = CaseTiming {
            retrieval_ms: (t1 - t0).as_secs_f64() * 1e3,
            generation_ms: (t2 - t1).as_secs_f64() * 1e3,
        };
        let audit = AuditEntry {
            query_id: query.id.clone(),
            mode: prepared.prompt.metadata.mode,
            backend: self.backend.name().to_string(),
            system_text: prepared.prompt.system_text,
            user_text: prepared.prompt.user_text,
            rounds: ensemble.rounds,
        };
        Ok((prediction, timing, audit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic, split, SyntheticSpec};

    fn data() -> (CaseSet, CaseSet) {
        let cs = generate_synthetic(&SyntheticSpec::standard(400, 4), 3).unwrap();
        let (train, _, test) = split(&cs, (0.8, 0.1, 0.1), 3).unwrap();
        (train, test)
    }

    #[test]
    fn save_load_round_trip_predicts_identically() {
        let (train, test) = data();
        let cfg = PipelineConfig::default();
        let a = Artifacts::build(&train, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let b = Artifacts::load(dir.path()).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        let pa = Pipeline::new(Arc::new(a), cfg.clone()).unwrap();
        let pb = Pipeline::new(Arc::new(b), cfg).unwrap();
        for q in test.cases.iter().take(5) {
            assert_eq!(pa.predict(q).unwrap().0, pb.predict(q).unwrap().0);
        }
        assert!(dir.path().join(IMPORTANCE_FILE).exists());
    }

    #[test]
    fn fingerprint_mismatch_is_fatal() {
        let (train, _) = data();
        let a = Arc::new(Artifacts::build(&train, &PipelineConfig::default()).unwrap());
        let other = PipelineConfig {
            use_pca: false,
            ..Default::default()
        };
        assert!(matches!(Pipeline::new(a.clone(), other), Err(Error::FingerprintMismatch { .. })));
        let runtime_only = PipelineConfig {
            k: 3,
            rounds: 2,
            ..Default::default()
        };
        assert!(Pipeline::new(a, runtime_only).is_ok());
    }

    #[test]
    fn modes_shape_the_prompt() {
        let (train, test) = data();
        let a = Arc::new(Artifacts::build(&train, &PipelineConfig::default()).unwrap());
        let q = &test.cases[0];
        for mode in InferenceMode::ALL {
            let p = Pipeline::new(a.clone(), PipelineConfig { mode, ..Default::default() }).unwrap();
            let prepared = p.prepare(q).unwrap();
            let (pred, _, _) = p.predict(q).unwrap();
            match mode {
                InferenceMode::ZeroShot => {
                    assert!(prepared.references.is_none() && prepared.prior.is_none());
                    assert_eq!(pred.y_hat, a.global_median);
                }
                InferenceMode::RandomFewShot => {
                    assert_eq!(prepared.references.unwrap().len(), 8);
                    assert!(prepared.prior.is_none());
                }
                InferenceMode::Rag => {
                    assert!(prepared.references.unwrap().len() <= 8);
                    assert!(prepared.prior.is_some());
                }
            }
        }
    }

    #[test]
    fn uniform_weights_without_pca() {
        let (train, _) = data();
        let cfg = PipelineConfig {
            use_pca: false,
            ..Default::default()
        };
        let a = Artifacts::build(&train, &cfg).unwrap();
        assert!(a.pca.is_none());
        assert!(a.weights.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            PipelineConfig { k: 0, ..Default::default() },
            PipelineConfig { rounds: 0, ..Default::default() },
            PipelineConfig { w_prior: -1.0, ..Default::default() },
            PipelineConfig { concurrency_limit: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
        let zero_shot = PipelineConfig {
            mode: InferenceMode::ZeroShot,
            k: 0,
            ..Default::default()
        };
        assert!(zero_shot.validate().is_ok());
    }
}
