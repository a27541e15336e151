//! Chat backends, multi-round sampling and numeric answer extraction.
//!
//! A prediction is sampled `rounds` times at scheduled temperatures; every
//! reply is parsed into minutes and clamped to the plausible range. Failed
//! rounds are retried, then dropped.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, LazyLock, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::derive_seed;
use crate::prompt::{Prompt, PromptMode};
use crate::stats;
use crate::strata::StratumLadder;

pub const MIN_MINUTES: f64 = 1.0;
pub const MAX_MINUTES: f64 = 810.0;
/// Temperature range for rounds after the first.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 0.4);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no number in model output: {0:?}")]
    UnparseableOutput(String),
    #[error("all {rounds} rounds failed; last error: {last}")]
    AllRoundsFailed { rounds: usize, last: String },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("rounds must be at least 1")]
    BadN,
}

/// One sampling request.
#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub prompt: &'a Prompt,
    pub temperature: f64,
    /// 0-based round index.
    pub round: usize,
    /// Per-request seed for backends that accept one.
    pub seed: u64,
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, LlmError>;
}

fn default_timeout_s() -> f64 {
    60.0
}

fn default_max_tokens() -> u32 {
    512
}

fn default_noise_sd() -> f64 {
    0.0
}

/// Serializable backend choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Chat-completions style HTTP endpoint.
    Http {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
        #[serde(default = "default_max_tokens")]
        max_tokens: u32,
    },
    /// Answers with the statistical prior's median.
    MockEchoPrior {
        #[serde(default = "default_noise_sd")]
        noise_sd: f64,
    },
    /// Answers with the mean duration of the best-matching references.
    MockReferenceMean {
        #[serde(default = "default_noise_sd")]
        noise_sd: f64,
    },
    /// Replays fixed replies in order.
    MockScripted { replies: Vec<String> },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::MockReferenceMean {
            noise_sd: default_noise_sd(),
        }
    }
}

impl BackendSpec {
    pub fn is_mock(&self) -> bool {
        !matches!(self, BackendSpec::Http { .. })
    }

    /// `fallback_minutes` is what mocks answer when the prompt carries no
    /// usable evidence.
    pub fn build(&self, fallback_minutes: f64) -> Result<Arc<dyn ChatBackend>, LlmError> {
        let wrap = |inner: Arc<dyn ChatBackend>, sd: f64| -> Result<Arc<dyn ChatBackend>, LlmError> {
            if !(sd.is_finite() && sd >= 0.0) {
                return Err(LlmError::Config(format!("noise_sd must be non-negative, got {sd}")));
            }
            Ok(if sd > 0.0 { Arc::new(Noisy::new(inner, sd)) } else { inner })
        };
        match self {
            BackendSpec::Http {
                endpoint,
                model,
                api_key_env,
                timeout_s,
                max_tokens,
            } => {
                let key = match api_key_env {
                    Some(var) => Some(
                        std::env::var(var)
                            .map_err(|_| LlmError::Config(format!("environment variable {var} is not set")))?,
                    ),
                    None => None,
                };
                Ok(Arc::new(HttpChat::new(
                    endpoint.clone(),
                    model.clone(),
                    key,
                    Duration::from_secs_f64(*timeout_s),
                    *max_tokens,
                )))
            }
            BackendSpec::MockEchoPrior { noise_sd } => wrap(Arc::new(MockEchoPrior::new(fallback_minutes)), *noise_sd),
            BackendSpec::MockReferenceMean { noise_sd } => {
                wrap(Arc::new(MockReferenceMean::new(fallback_minutes)), *noise_sd)
            }
            BackendSpec::MockScripted { replies } => {
                if replies.is_empty() {
                    return Err(LlmError::Config("mock_scripted needs at least one reply".into()));
                }
                Ok(Arc::new(MockScripted::new(replies.iter().cloned().map(Some).collect())))
            }
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
    max_tokens: u32,
    seed: u64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

/// Blocking client for chat-completions endpoints: posts
/// `{model, messages, temperature, max_tokens, seed}` and reads
/// `choices[0].message.content`.
pub struct HttpChat {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_tokens: u32,
    agent: ureq::Agent,
}

impl HttpChat {
    pub fn new(endpoint: String, model: String, api_key: Option<String>, timeout: Duration, max_tokens: u32) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpChat {
            endpoint,
            model,
            api_key,
            max_tokens,
            agent,
        }
    }
}

impl ChatBackend for HttpChat {
    fn name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, LlmError> {
        let body = ChatBody {
            model: &self.model,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &request.prompt.system_text,
                },
                ChatMessage {
                    role: "user",
                    content: &request.prompt.user_text,
                },
            ],
            temperature: request.temperature,
            max_tokens: self.max_tokens,
            seed: request.seed,
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp: ChatResponse = req
            .send_json(&body)
            .map_err(|e| LlmError::Transport(e.to_string()))?
            .into_body()
            .read_json()
            .map_err(|e| LlmError::Transport(format!("malformed response: {e}")))?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Transport("response has no message content".into()))
    }
}

/// Reply in the format the mock backends use.
pub fn answer_text(minutes: f64) -> String {
    format!("Based on the evidence provided.\nPREDICTION: {} minutes", (minutes * 100.0).round() / 100.0)
}

/// Deterministic stand-in that answers with the prior median.
#[derive(Debug, Clone)]
pub struct MockEchoPrior {
    fallback: f64,
}

impl MockEchoPrior {
    pub fn new(fallback_minutes: f64) -> Self {
        MockEchoPrior {
            fallback: fallback_minutes,
        }
    }
}

impl ChatBackend for MockEchoPrior {
    fn name(&self) -> &str {
        "mock_echo_prior"
    }

    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, LlmError> {
        let m = &request.prompt.metadata;
        Ok(answer_text(m.prior.as_ref().map_or(self.fallback, |p| p.median_min)))
    }
}

/// Deterministic stand-in that averages the reference durations at the most
/// specific key-attribute tier shared with the query. When no reference
/// shares even the first key attribute it answers with the prior median,
/// or the fallback when there is no prior.
#[derive(Debug, Clone)]
pub struct MockReferenceMean {
    fallback: f64,
}

impl MockReferenceMean {
    pub fn new(fallback_minutes: f64) -> Self {
        MockReferenceMean {
            fallback: fallback_minutes,
        }
    }

    pub fn estimate(&self, prompt: &Prompt) -> f64 {
        let m = &prompt.metadata;
        let ladder = StratumLadder::from_attributes(m.key_attributes.clone());
        for level in 0..ladder.tiers().len() {
            let matched: Vec<f64> = m
                .references
                .iter()
                .filter(|r| ladder.matches(&m.query, &r.case, level))
                .filter_map(|r| r.case.duration_min)
                .collect();
            if !matched.is_empty() {
                return stats::mean(&matched);
            }
        }
        m.prior.as_ref().map_or(self.fallback, |p| p.median_min)
    }
}

impl ChatBackend for MockReferenceMean {
    fn name(&self) -> &str {
        "mock_reference_mean"
    }

    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, LlmError> {
        Ok(answer_text(self.estimate(request.prompt)))
    }
}

/// Multiplies another backend's answer by `exp(N(0, sd·(1 + τ)))`, seeded
/// by query id and round so replays are identical.
pub struct Noisy {
    inner: Arc<dyn ChatBackend>,
    sd: f64,
    name: String,
}

impl Noisy {
    pub fn new(inner: Arc<dyn ChatBackend>, sd: f64) -> Self {
        let name = format!("{}+noise", inner.name());
        Noisy { inner, sd, name }
    }
}

impl ChatBackend for Noisy {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, LlmError> {
        let text = self.inner.complete(request)?;
        let base = parse_duration(&text, f64::MAX)?.minutes;
        let label = format!("{}#{}", request.prompt.metadata.query.id, request.round);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(request.seed, &label));
        let noise = Normal::new(0.0, self.sd * (1.0 + request.temperature))
            .map_err(|e| LlmError::Config(e.to_string()))?
            .sample(&mut rng);
        Ok(answer_text(base * noise.exp()))
    }
}

/// Replays canned replies in order, cycling; `None` simulates a transport
/// failure. Intended for tests.
pub struct MockScripted {
    replies: Vec<Option<String>>,
    calls: AtomicUsize,
}

impl MockScripted {
    pub fn new(replies: Vec<Option<String>>) -> Self {
        assert!(!replies.is_empty(), "scripted backend needs at least one reply");
        MockScripted {
            replies,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for MockScripted {
    fn name(&self) -> &str {
        "mock_scripted"
    }

    fn complete(&self, _request: &ChatRequest<'_>) -> Result<String, LlmError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        self.replies[i % self.replies.len()]
            .clone()
            .ok_or_else(|| LlmError::Transport("scripted failure".into()))
    }
}

/// Round 1 is greedy (τ = 0); later rounds draw τ uniformly from
/// [`TEMPERATURE_RANGE`].
pub fn schedule_temperatures(rounds: usize, seed: u64) -> Result<Vec<f64>, LlmError> {
    if rounds == 0 {
        return Err(LlmError::BadN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..rounds)
        .map(|r| {
            if r == 0 {
                0.0
            } else {
                rng.random_range(TEMPERATURE_RANGE.0..=TEMPERATURE_RANGE.1)
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParsedDuration {
    pub minutes: f64,
    pub clamped: bool,
}

static PREDICTION_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)prediction\s*[:=]\s*(-?\d+(?:\.\d+)?)").unwrap());
static NUMBER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap());

/// The number after the last `PREDICTION:` marker, else the last number in
/// the text, clamped to `[MIN_MINUTES, max_minutes]`.
pub fn parse_duration(text: &str, max_minutes: f64) -> Result<ParsedDuration, LlmError> {
    let raw = PREDICTION_RE
        .captures_iter(text)
        .last()
        .map(|c| c[1].to_string())
        .or_else(|| NUMBER_RE.find_iter(text).last().map(|m| m.as_str().to_string()))
        .ok_or_else(|| {
            let snippet: String = text.chars().take(200).collect();
            LlmError::UnparseableOutput(snippet)
        })?;
    let x: f64 = raw.parse().map_err(|_| LlmError::UnparseableOutput(raw.clone()))?;
    let minutes = x.clamp(MIN_MINUTES, max_minutes.max(MIN_MINUTES));
    Ok(ParsedDuration {
        minutes,
        clamped: minutes != x,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub rounds: usize,
    /// Extra attempts per round after the first.
    pub max_retries: usize,
    /// Fail fast with `BackendUnreachable` when the first round cannot
    /// reach the backend.
    pub strict: bool,
    /// Upper clamp for parsed answers.
    pub max_minutes: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            rounds: 5,
            max_retries: 2,
            strict: false,
            max_minutes: MAX_MINUTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub temperature: f64,
    pub attempts: usize,
    pub raw: Option<String>,
    pub minutes: Option<f64>,
    pub clamped: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEnsemble {
    pub rounds: Vec<RoundRecord>,
    pub seed: u64,
}

impl PredictionEnsemble {
    /// Parsed values of the retained rounds, in round order.
    pub fn values(&self) -> Vec<f64> {
        self.rounds.iter().filter_map(|r| r.minutes).collect()
    }

    pub fn dropped(&self) -> usize {
        self.rounds.iter().filter(|r| r.minutes.is_none()).count()
    }
}

/// Samples `cfg.rounds` answers. Requests are sequential within a case;
/// parallelism happens across cases. Rounds that fail are dropped; if no
/// request got any reply the backend counts as unreachable.
pub fn predict_ensemble(
    prompt: &Prompt,
    backend: &dyn ChatBackend,
    cfg: &EnsembleConfig,
    seed: u64,
) -> Result<PredictionEnsemble, LlmError> {
    let temps = schedule_temperatures(cfg.rounds, seed)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut last_error = String::new();
    let mut answered = false;
    for (round, &temperature) in temps.iter().enumerate() {
        let mut record = RoundRecord {
            round,
            temperature,
            attempts: 0,
            raw: None,
            minutes: None,
            clamped: false,
            error: None,
        };
        for attempt in 0..=cfg.max_retries {
            record.attempts = attempt + 1;
            let request = ChatRequest {
                prompt,
                temperature,
                round,
                seed: derive_seed(seed, &format!("round{round}")),
            };
            match backend.complete(&request) {
                Ok(text) => {
                    answered = true;
                    let parsed = parse_duration(&text, cfg.max_minutes);
                    record.raw = Some(text);
                    match parsed {
                        Ok(p) => {
                            record.minutes = Some(p.minutes);
                            record.clamped = p.clamped;
                            record.error = None;
                            break;
                        }
                        Err(e) => record.error = Some(e.to_string()),
                    }
                }
                Err(LlmError::Transport(msg)) if cfg.strict && round == 0 && attempt == cfg.max_retries => {
                    return Err(LlmError::BackendUnreachable(msg));
                }
                Err(e) => record.error = Some(e.to_string()),
            }
        }
        if let Some(e) = &record.error {
            log::warn!("query {} round {round} dropped: {e}", prompt.metadata.query.id);
            last_error = e.clone();
        }
        records.push(record);
    }
    let outcome = PredictionEnsemble { rounds: records, seed };
    if !answered {
        return Err(LlmError::BackendUnreachable(last_error));
    }
    if outcome.values().is_empty() {
        return Err(LlmError::AllRoundsFailed {
            rounds: cfg.rounds,
            last: last_error,
        });
    }
    Ok(outcome)
}

/// One audit-log line per case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub query_id: String,
    pub mode: PromptMode,
    pub backend: String,
    pub system_text: String,
    pub user_text: String,
    pub rounds: Vec<RoundRecord>,
}

/// Append-only JSON-lines audit log, safe to share across threads.
pub struct AuditLog {
    out: Mutex<Box<dyn Write + Send>>,
}

impl AuditLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        AuditLog { out: Mutex::new(out) }
    }

    pub fn create(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let f = std::fs::File::create(path)?;
        Ok(Self::new(Box::new(std::io::BufWriter::new(f))))
    }

    pub fn record(&self, entry: &AuditEntry) -> std::io::Result<()> {
        let line = serde_json::to_string(entry).map_err(std::io::Error::other)?;
        let mut out = self.out.lock().unwrap();
        writeln!(out, "{line}")
    }

    pub fn flush(&self) -> std::io::Result<()> {
        self.out.lock().unwrap().flush()
    }
}
