//! Heterogeneous feature embedding with per-category dimension
//! normalization.
//!
//! Each feature kind is encoded into its own block:
//!
//! * numerical: z-score with population statistics of the training set,
//!   missing values imputed with the training mean (so they encode as 0);
//! * ordinal: `rank / (levels - 1)`, one coordinate per feature;
//! * categorical: one-hot over the sorted training vocabulary plus a
//!   trailing `UNKNOWN` slot for missing or unseen levels;
//! * boolean: 0/1;
//! * text: one embedder vector per text feature.
//!
//! Blocks are concatenated in that order and each block `v_c` is scaled by
//! `1 / sqrt(dim(v_c))`, so a 256-wide text block cannot drown out a
//! 3-wide ordinal block in cosine similarity.

pub mod text;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{CaseSet, FeatureKind, FeatureSchema, SurgicalCase, Value};
pub use text::{EmbedError, EmbedderSpec, HashingEmbedder, RemoteEmbedder, TextEmbedder};

pub const UNKNOWN_TOKEN: &str = "UNKNOWN";
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("cannot fit an encoder on an empty training set")]
    EmptyTrainingSet,
    #[error("case '{case}' does not match the schema: {message}")]
    SchemaMismatch { case: String, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalState {
    pub name: String,
    pub levels: Vec<String>,
    /// Encoded value used for missing entries (training mean).
    pub missing_fill: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalState {
    pub name: String,
    /// Sorted training levels; index `levels.len()` is the UNKNOWN slot.
    pub levels: Vec<String>,
}

impl CategoricalState {
    pub fn width(&self) -> usize {
        self.levels.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BooleanState {
    pub name: String,
    pub missing_fill: f64,
}

/// Everything learned during `fit`; serializable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub schema: FeatureSchema,
    pub numerical: Vec<NumericStats>,
    pub ordinal: Vec<OrdinalState>,
    pub categorical: Vec<CategoricalState>,
    pub boolean: Vec<BooleanState>,
    pub text_features: Vec<String>,
    pub embedder: EmbedderSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: FeatureKind,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    /// `1 / sqrt(len)`.
    pub fn alpha(&self) -> f64 {
        1.0 / (self.len as f64).sqrt()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpan {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Layout of the embedding: one segment per non-empty feature kind, and
/// the coordinates owned by each feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub segments: Vec<Segment>,
    pub features: Vec<FeatureSpan>,
}

impl SegmentMap {
    pub fn dim(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn segment(&self, kind: FeatureKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedEmbedding {
    pub vector: Vec<f64>,
    pub case_id: String,
}

/// A fitted, immutable encoder. Safe to share across threads.
#[derive(Clone)]
pub struct FittedEncoder {
    state: EncoderState,
    layout: SegmentMap,
    embedder: Arc<dyn TextEmbedder>,
}

impl fmt::Debug for FittedEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FittedEncoder")
            .field("state", &self.state)
            .field("dim", &self.layout.dim())
            .finish()
    }
}

fn parse_bool(v: &Value) -> Option<f64> {
    match v {
        Value::Number(x) if *x == 1.0 => Some(1.0),
        Value::Number(x) if *x == 0.0 => Some(0.0),
        Value::Text(t) => match t.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => Some(1.0),
            "false" | "no" | "0" => Some(0.0),
            _ => None,
        },
        _ => None,
    }
}

fn mismatch(case: &SurgicalCase, message: String) -> EncodeError {
    EncodeError::SchemaMismatch {
        case: case.id.clone(),
        message,
    }
}

/// Fits an encoder with the default hashing text embedder.
pub fn fit(train: &CaseSet) -> Result<FittedEncoder, EncodeError> {
    fit_with(train, EmbedderSpec::default())
}

pub fn fit_with(train: &CaseSet, embedder: EmbedderSpec) -> Result<FittedEncoder, EncodeError> {
    if train.is_empty() {
        return Err(EncodeError::EmptyTrainingSet);
    }
    let schema = &train.schema;
    for c in &train.cases {
        c.conforms_to(schema).map_err(|m| mismatch(c, m))?;
    }

    let numerical = schema
        .features_of(FeatureKind::Numerical)
        .map(|f| {
            let xs: Vec<f64> = train.cases.iter().filter_map(|c| c.value(&f.name).as_number()).collect();
            let (mean, std) = if xs.is_empty() {
                (0.0, 1.0)
            } else {
                let m = crate::stats::mean(&xs);
                let s = crate::stats::variance(&xs).sqrt();
                (m, if s < MIN_STD { 1.0 } else { s })
            };
            NumericStats {
                name: f.name.clone(),
                mean,
                std,
            }
        })
        .collect();

    let mut ordinal = Vec::new();
    for f in schema.features_of(FeatureKind::Ordinal) {
        let levels = schema.ordinal_orders[&f.name].clone();
        let mut state = OrdinalState {
            name: f.name.clone(),
            levels,
            missing_fill: 0.0,
        };
        let encoded: Vec<f64> = train
            .cases
            .iter()
            .filter_map(|c| c.value(&f.name).as_text())
            .map(|l| state.encode_level(&l).ok_or_else(|| format!("undeclared level '{l}'")))
            .collect::<Result<_, _>>()
            .map_err(|m| EncodeError::SchemaMismatch {
                case: String::new(),
                message: format!("ordinal '{}': {m}", f.name),
            })?;
        if !encoded.is_empty() {
            state.missing_fill = crate::stats::mean(&encoded);
        }
        ordinal.push(state);
    }

    let categorical = schema
        .features_of(FeatureKind::Categorical)
        .map(|f| {
            let mut levels: Vec<String> = train
                .cases
                .iter()
                .filter_map(|c| c.value(&f.name).as_text())
                .filter(|l| l != UNKNOWN_TOKEN)
                .collect();
            levels.sort();
            levels.dedup();
            CategoricalState {
                name: f.name.clone(),
                levels,
            }
        })
        .collect();

    let mut boolean = Vec::new();
    for f in schema.features_of(FeatureKind::Boolean) {
        let mut xs = Vec::new();
        for c in &train.cases {
            let v = c.value(&f.name);
            if v.is_missing() {
                continue;
            }
            xs.push(parse_bool(v).ok_or_else(|| mismatch(c, format!("'{v}' is not a boolean token for '{}'", f.name)))?);
        }
        boolean.push(BooleanState {
            name: f.name.clone(),
            missing_fill: if xs.is_empty() { 0.0 } else { crate::stats::mean(&xs) },
        });
    }

    let text_features = schema.features_of(FeatureKind::Text).map(|f| f.name.clone()).collect();
    Ok(FittedEncoder::from_state(EncoderState {
        schema: schema.clone(),
        numerical,
        ordinal,
        categorical,
        boolean,
        text_features,
        embedder,
    }))
}

impl OrdinalState {
    fn encode_level(&self, level: &str) -> Option<f64> {
        let rank = self.levels.iter().position(|l| l == level)?;
        Some(if self.levels.len() > 1 {
            rank as f64 / (self.levels.len() - 1) as f64
        } else {
            0.0
        })
    }
}

impl FittedEncoder {
    pub fn from_state(state: EncoderState) -> Self {
        let embedder = state.embedder.build();
        Self::from_state_with_embedder(state, embedder)
    }

    /// Uses a caller-supplied embedder instance, e.g. a shared remote client.
    pub fn from_state_with_embedder(state: EncoderState, embedder: Arc<dyn TextEmbedder>) -> Self {
        let layout = Self::layout_of(&state);
        FittedEncoder {
            state,
            layout,
            embedder,
        }
    }

    fn layout_of(state: &EncoderState) -> SegmentMap {
        let text_dim = state.embedder.dim();
        let mut features = Vec::new();
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push_kind = |kind: FeatureKind, spans: Vec<(String, usize)>| {
            let start = offset;
            for (name, len) in spans {
                features.push(FeatureSpan { name, offset, len });
                offset += len;
            }
            if offset > start {
                segments.push(Segment {
                    kind,
                    offset: start,
                    len: offset - start,
                });
            }
        };
        push_kind(FeatureKind::Numerical, state.numerical.iter().map(|s| (s.name.clone(), 1)).collect());
        push_kind(FeatureKind::Ordinal, state.ordinal.iter().map(|s| (s.name.clone(), 1)).collect());
        push_kind(
            FeatureKind::Categorical,
            state.categorical.iter().map(|s| (s.name.clone(), s.width())).collect(),
        );
        push_kind(FeatureKind::Boolean, state.boolean.iter().map(|s| (s.name.clone(), 1)).collect());
        push_kind(FeatureKind::Text, state.text_features.iter().map(|n| (n.clone(), text_dim)).collect());
        SegmentMap { segments, features }
    }

    pub fn state(&self) -> &EncoderState {
        &self.state
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.state.schema
    }

    pub fn layout(&self) -> &SegmentMap {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn embedder(&self) -> &Arc<dyn TextEmbedder> {
        &self.embedder
    }

    fn text_of(case: &SurgicalCase, name: &str) -> String {
        case.value(name).as_text().filter(|s| !s.is_empty()).unwrap_or_else(|| UNKNOWN_TOKEN.to_string())
    }

    /// Unscaled per-kind blocks `v_c`, in segment order.
    pub fn encode_raw(&self, case: &SurgicalCase) -> Result<Vec<(FeatureKind, Vec<f64>)>, EncodeError> {
        let texts: Vec<String> = self.state.text_features.iter().map(|n| Self::text_of(case, n)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let vectors = self.embedder.embed(&refs)?;
        self.encode_raw_with(case, &vectors)
    }

    fn encode_raw_with(
        &self,
        case: &SurgicalCase,
        text_vectors: &[Vec<f64>],
    ) -> Result<Vec<(FeatureKind, Vec<f64>)>, EncodeError> {
        let schema = &self.state.schema;
        for (name, value) in &case.values {
            match schema.kind_of(name) {
                None => return Err(mismatch(case, format!("unknown feature '{name}'"))),
                Some(FeatureKind::Numerical) if matches!(value, Value::Text(_)) => {
                    return Err(mismatch(case, format!("numerical feature '{name}' holds text")))
                }
                _ => {}
            }
        }

        let num = self
            .state
            .numerical
            .iter()
            .map(|s| match case.value(&s.name).as_number() {
                Some(x) => (x - s.mean) / s.std,
                None => 0.0,
            })
            .collect();

        let ord = self
            .state
            .ordinal
            .iter()
            .map(|s| match case.value(&s.name).as_text() {
                None => Ok(s.missing_fill),
                Some(l) => s
                    .encode_level(&l)
                    .ok_or_else(|| mismatch(case, format!("undeclared level '{l}' for ordinal '{}'", s.name))),
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut cat = Vec::new();
        for s in &self.state.categorical {
            let mut block = vec![0.0; s.width()];
            let slot = case
                .value(&s.name)
                .as_text()
                .and_then(|l| s.levels.binary_search(&l).ok())
                .unwrap_or(s.levels.len());
            block[slot] = 1.0;
            cat.extend(block);
        }

        let boolean = self
            .state
            .boolean
            .iter()
            .map(|s| {
                let v = case.value(&s.name);
                if v.is_missing() {
                    Ok(s.missing_fill)
                } else {
                    parse_bool(v).ok_or_else(|| mismatch(case, format!("'{v}' is not a boolean token for '{}'", s.name)))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;

        let text: Vec<f64> = text_vectors.iter().flatten().copied().collect();
        debug_assert_eq!(text.len(), self.state.text_features.len() * self.embedder.dim());

        Ok([
            (FeatureKind::Numerical, num),
            (FeatureKind::Ordinal, ord),
            (FeatureKind::Categorical, cat),
            (FeatureKind::Boolean, boolean),
            (FeatureKind::Text, text),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .collect())
    }

    fn assemble(&self, case: &SurgicalCase, blocks: Vec<(FeatureKind, Vec<f64>)>) -> NormalizedEmbedding {
        let mut vector = Vec::with_capacity(self.dim());
        for (_, block) in blocks {
            let alpha = 1.0 / (block.len() as f64).sqrt();
            vector.extend(block.into_iter().map(|x| alpha * x));
        }
        NormalizedEmbedding {
            vector,
            case_id: case.id.clone(),
        }
    }

    pub fn encode(&self, case: &SurgicalCase) -> Result<NormalizedEmbedding, EncodeError> {
        let blocks = self.encode_raw(case)?;
        Ok(self.assemble(case, blocks))
    }

    /// Encodes many cases, embedding each distinct text once.
    pub fn encode_batch(&self, cases: &[SurgicalCase]) -> Result<Vec<NormalizedEmbedding>, EncodeError> {
        let mut unique: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for c in cases {
            for n in &self.state.text_features {
                let t = Self::text_of(c, n);
                if !index.contains_key(&t) {
                    index.insert(t.clone(), unique.len());
                    unique.push(t);
                }
            }
        }
        let mut vectors = Vec::with_capacity(unique.len());
        for chunk in unique.chunks(256) {
            let refs: Vec<&str> = chunk.iter().map(String::as_str).collect();
            vectors.extend(self.embedder.embed(&refs)?);
        }
        cases
            .iter()
            .map(|c| {
                let tv: Vec<Vec<f64>> = self
                    .state
                    .text_features
                    .iter()
                    .map(|n| vectors[index[&Self::text_of(c, n)]].clone())
                    .collect();
                let blocks = self.encode_raw_with(c, &tv)?;
                Ok(self.assemble(c, blocks))
            })
            .collect()
    }

    /// Per-feature category vocabularies, for reports.
    pub fn vocabularies(&self) -> BTreeMap<String, Vec<String>> {
        self.state
            .categorical
            .iter()
            .map(|s| (s.name.clone(), s.levels.clone()))
            .collect()
    }
}
