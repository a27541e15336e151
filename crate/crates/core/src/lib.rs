//! Retrieval-augmented surgical duration prediction.
//!
//! Cases are embedded feature-kind by feature-kind, reweighted with
//! principal-component importance scores and searched by cosine similarity.
//! Retrieved neighbours and stratum statistics are rendered into a prompt,
//! a chat model is sampled over several rounds, and the answers are fused
//! with the stratum median by Bayesian averaging.

pub mod aggregation;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod hashing;
pub mod llm;
pub mod pca;
pub mod pipeline;
pub mod prior;
pub mod prompt;
pub mod retrieval;
pub mod schema;
pub mod stats;
pub mod strata;
pub mod synthetic;

pub use aggregation::{aggregate, bayesian_average, estimate, AggregateEstimate, AggregationStrategy};
pub use encoder::{EmbedderSpec, FittedEncoder, NormalizedEmbedding, SegmentMap};
pub use error::{Error, Result};
pub use evaluation::{
    compute_metrics, global_median_baseline, run_ablation_grid, run_experiment, AblationAxis, ExperimentReport, Metrics,
};
pub use llm::{parse_duration, predict_ensemble, schedule_temperatures, BackendSpec, ChatBackend, PredictionEnsemble};
pub use pca::{apply_weights, derive_weights, fit_pca, ComponentSelection, PcaModel, WeightVector, WeightedEmbedding};
pub use pipeline::{Artifacts, CasePrediction, InferenceMode, Pipeline, PipelineConfig};
pub use prior::{compute_prior, StatisticalPrior, StratumCache};
pub use prompt::{build_prompt, Prompt, PromptMode, PromptTemplate};
pub use retrieval::{postprocess, FlatIndex, Reference, ReferenceSet, RetrievalCandidate};
pub use schema::{ingest_csv, load_schema, CaseSet, FeatureKind, FeatureSchema, SurgicalCase, Value};
pub use strata::StratumLadder;
pub use synthetic::{generate_synthetic, split, synthetic_schema, SyntheticSpec};
