use thiserror::Error;

use crate::aggregation::AggregationError;
use crate::encoder::EncodeError;
use crate::evaluation::EvalError;
use crate::llm::LlmError;
use crate::pca::PcaError;
use crate::prompt::PromptError;
use crate::retrieval::RetrievalError;
use crate::schema::SchemaError;
use crate::synthetic::SpecError;

/// Any failure of the end-to-end pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("artifacts were built for fingerprint {built}, configuration gives {current}")]
    FingerprintMismatch { built: String, current: String },
    #[error("artifact {path}: {message}")]
    Artifact { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True when the model backend could not be reached at all.
    pub fn is_backend_unreachable(&self) -> bool {
        matches!(self, Error::Llm(LlmError::BackendUnreachable(_)))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
