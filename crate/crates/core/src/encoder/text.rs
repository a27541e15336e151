//! Text embedders: a hermetic feature-hashing embedder and a client for
//! remote embedding services.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::fnv1a;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding service error: {0}")]
    Service(String),
    #[error("embedding service returned {got} vectors of dimension {dim:?}, expected {expected}")]
    Shape {
        got: usize,
        dim: Option<usize>,
        expected: usize,
    },
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Embeds every input; each output vector has unit L2 norm.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

/// Serializable description of an embedder, persisted with fitted encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Hashing {
        dim: usize,
    },
    Remote {
        endpoint: String,
        #[serde(default)]
        model: Option<String>,
        dim: usize,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        /// Environment variable holding a bearer token, if any.
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

fn default_timeout_s() -> f64 {
    30.0
}

fn default_in_flight() -> usize {
    4
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hashing {
            dim: HashingEmbedder::DEFAULT_DIM,
        }
    }
}

impl EmbedderSpec {
    pub fn dim(&self) -> usize {
        match self {
            EmbedderSpec::Hashing { dim } | EmbedderSpec::Remote { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Arc<dyn TextEmbedder> {
        match self {
            EmbedderSpec::Hashing { dim } => Arc::new(HashingEmbedder::new(*dim)),
            EmbedderSpec::Remote {
                endpoint,
                model,
                dim,
                timeout_s,
                max_in_flight,
                api_key_env,
            } => Arc::new(RemoteEmbedder::new(
                endpoint.clone(),
                model.clone(),
                *dim,
                Duration::from_secs_f64(*timeout_s),
                *max_in_flight,
                api_key_env.as_deref().and_then(|v| std::env::var(v).ok()),
            )),
        }
    }
}

/// Signed feature hashing over word tokens and character trigrams of each
/// word (with boundary markers). Output is L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let mut add = |feature: &str| {
            let h = fnv1a(feature.as_bytes());
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        };
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            add(&format!("w:{word}"));
            let chars: Vec<char> = format!("^{word}$").chars().collect();
            for gram in chars.windows(3) {
                add(&format!("g:{}", gram.iter().collect::<String>()));
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // empty input or cancelling collisions
            let idx = (fnv1a(format!("t:{lower}").as_bytes()) % self.dim as u64) as usize;
            v[idx] = 1.0;
            return v;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl TextEmbedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub(crate) struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub(crate) fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub(crate) struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    input: &'a [&'a str],
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Client for `POST {"input": [...]}` → `{"data": [{"embedding": [...]}]}`
/// embedding endpoints. Pooling is the service's concern; returned vectors
/// are re-normalized here.
pub struct RemoteEmbedder {
    endpoint: String,
    model: Option<String>,
    dim: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
    in_flight: Semaphore,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: String,
        model: Option<String>,
        dim: usize,
        timeout: Duration,
        max_in_flight: usize,
        api_key: Option<String>,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        RemoteEmbedder {
            endpoint,
            model,
            dim,
            api_key,
            agent,
            in_flight: Semaphore::new(max_in_flight),
        }
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let _permit = self.in_flight.acquire();
        let body = EmbeddingRequest {
            input: texts,
            model: self.model.as_deref(),
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp: EmbeddingResponse = req
            .send_json(&body)
            .map_err(|e| EmbedError::Service(e.to_string()))?
            .into_body()
            .read_json()
            .map_err(|e| EmbedError::Service(e.to_string()))?;
        let shape_err = |resp: &EmbeddingResponse| EmbedError::Shape {
            got: resp.data.len(),
            dim: resp.data.first().map(|d| d.embedding.len()),
            expected: self.dim,
        };
        if resp.data.len() != texts.len() || resp.data.iter().any(|d| d.embedding.len() != self.dim) {
            return Err(shape_err(&resp));
        }
        resp.data
            .into_iter()
            .map(|d| {
                let norm = d.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(norm.is_finite() && norm > 0.0) {
                    return Err(EmbedError::Service("service returned a zero or non-finite vector".into()));
                }
                Ok(d.embedding.into_iter().map(|x| x / norm).collect())
            })
            .collect()
    }
}
