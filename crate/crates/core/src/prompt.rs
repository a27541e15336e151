//! Prompt synthesis: role definition, similar-case demonstrations,
//! statistical prior and the query profile, rendered from a text template.
//!
//! Template sections and their placeholders:
//!
//! | section        | placeholders                                                        |
//! |----------------|---------------------------------------------------------------------|
//! | `system`       | none                                                                |
//! | `references`   | `{cases}`                                                           |
//! | `reference`    | `{index}` `{similarity}` `{features}` `{duration}`                  |
//! | `statistics`   | `{stratum}` `{cohort_size}` `{median}` `{mean}` `{min}` `{max}` `{q1}` `{q3}` |
//! | `query`        | `{features}`                                                        |
//! | `user`         | `{references}` `{statistics}` `{query}`                             |
//!
//! The output-format instruction [`OUTPUT_CONTRACT`] is always appended to
//! the system text.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prior::StatisticalPrior;
use crate::retrieval::{Reference, ReferenceSet};
use crate::schema::{FeatureSchema, SurgicalCase};

pub const OUTPUT_CONTRACT: &str =
    "Respond with the final answer as `PREDICTION: <integer> minutes` on the last line.";
pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/default_prompt.txt");
pub const DEFAULT_MAX_CHARS: usize = 32_000;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template: {0}")]
    Template(String),
    #[error("mode {mode} {message}")]
    ModeArgumentMismatch { mode: PromptMode, message: &'static str },
    #[error("reference case '{0}' has no duration")]
    MissingDuration(String),
    #[error("prompt is {len} characters, over the {max} limit")]
    TooLong { len: usize, max: usize },
    #[error("I/O error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    RandomFewShot,
    Rag,
    /// Retrieved references without the statistics block.
    RagWithoutPrior,
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::ZeroShot => "zero_shot",
            PromptMode::RandomFewShot => "random_few_shot",
            PromptMode::Rag => "rag",
            PromptMode::RagWithoutPrior => "rag_without_prior",
        })
    }
}

const SECTIONS: [(&str, &[&str]); 6] = [
    ("system", &[]),
    ("references", &["cases"]),
    ("reference", &["index", "similarity", "features", "duration"]),
    ("statistics", &["stratum", "cohort_size", "median", "mean", "min", "max", "q1", "q3"]),
    ("query", &["features"]),
    ("user", &["references", "statistics", "query"]),
];

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    sections: BTreeMap<String, Vec<Piece>>,
    pub max_chars: usize,
}

fn parse_pieces(section: &str, text: &str, allowed: &[&str]) -> Result<Vec<Piece>, PromptError> {
    let mut pieces = Vec::new();
    let mut lit = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                lit.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                lit.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) => name.push(ch),
                        None => return Err(PromptError::Template(format!("unclosed placeholder in [[{section}]]"))),
                    }
                }
                if !allowed.contains(&name.as_str()) {
                    return Err(PromptError::Template(format!("unknown placeholder {{{name}}} in [[{section}]]")));
                }
                if !lit.is_empty() {
                    pieces.push(Piece::Literal(std::mem::take(&mut lit)));
                }
                pieces.push(Piece::Slot(name));
            }
            '}' => return Err(PromptError::Template(format!("stray '}}' in [[{section}]]"))),
            c => lit.push(c),
        }
    }
    if !lit.is_empty() {
        pieces.push(Piece::Literal(lit));
    }
    Ok(pieces)
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        let mut current: Option<String> = None;
        for line in text.lines() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix("[[").and_then(|s| s.strip_suffix("]]")) {
                if raw.contains_key(name) {
                    return Err(PromptError::Template(format!("section [[{name}]] repeated")));
                }
                raw.insert(name.to_string(), String::new());
                current = Some(name.to_string());
                continue;
            }
            match &current {
                None if trimmed.is_empty() || trimmed.starts_with('#') => {}
                None => return Err(PromptError::Template("text before the first section".into())),
                Some(name) => {
                    let body = raw.get_mut(name).unwrap();
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        let mut sections = BTreeMap::new();
        for (name, allowed) in SECTIONS {
            let body = raw
                .remove(name)
                .ok_or_else(|| PromptError::Template(format!("missing section [[{name}]]")))?;
            sections.insert(name.to_string(), parse_pieces(name, &body, allowed)?);
        }
        if let Some(extra) = raw.keys().next() {
            return Err(PromptError::Template(format!("unknown section [[{extra}]]")));
        }
        Ok(PromptTemplate {
            sections,
            max_chars: DEFAULT_MAX_CHARS,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    fn render(&self, section: &str, values: &[(&str, &str)]) -> String {
        let mut out = String::new();
        for piece in &self.sections[section] {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(name) => {
                    let v = values.iter().find(|(k, _)| k == name).map(|(_, v)| *v).unwrap_or("");
                    out.push_str(v);
                }
            }
        }
        out
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("shipped template parses")
    }
}

/// Structured context carried next to the rendered text, for audit logs
/// and for deterministic mock backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMetadata {
    pub mode: PromptMode,
    pub query: SurgicalCase,
    pub key_attributes: Vec<String>,
    pub references: Vec<Reference>,
    pub prior: Option<StatisticalPrior>,
}

impl PromptMetadata {
    pub fn k_used(&self) -> usize {
        self.references.len()
    }

    pub fn stratum(&self) -> Option<&str> {
        self.prior.as_ref().map(|p| p.stratum.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub system_text: String,
    pub user_text: String,
    pub metadata: PromptMetadata,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.system_text.chars().count() + self.user_text.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Whole minutes when integral, otherwise one decimal.
pub fn format_minutes(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{:.0}", x)
    } else {
        format!("{:.1}", x)
    }
}

fn render_features(case: &SurgicalCase, schema: &FeatureSchema) -> String {
    schema
        .features
        .iter()
        .map(|f| {
            let v = case.value(&f.name).as_text().unwrap_or_else(|| "unknown".into());
            format!("- {}: {}\n", f.name.replace('_', " "), v)
        })
        .collect()
}

/// One demonstration block: features, similarity to three decimals and the
/// observed duration in whole minutes.
pub fn render_reference(
    case: &SurgicalCase,
    similarity: f64,
    index: usize,
    schema: &FeatureSchema,
    template: &PromptTemplate,
) -> Result<String, PromptError> {
    let duration = case.duration_min.ok_or_else(|| PromptError::MissingDuration(case.id.clone()))?;
    Ok(template.render(
        "reference",
        &[
            ("index", &index.to_string()),
            ("similarity", &format!("{similarity:.3}")),
            ("features", &render_features(case, schema)),
            ("duration", &format!("{:.0}", duration)),
        ],
    ))
}

fn render_statistics(prior: &StatisticalPrior, template: &PromptTemplate) -> String {
    template.render(
        "statistics",
        &[
            ("stratum", &prior.stratum),
            ("cohort_size", &prior.cohort_size.to_string()),
            ("median", &format_minutes(prior.median_min)),
            ("mean", &format_minutes(prior.mean_min)),
            ("min", &format_minutes(prior.range_min.0)),
            ("max", &format_minutes(prior.range_min.1)),
            ("q1", &format_minutes(prior.iqr_min.0)),
            ("q3", &format_minutes(prior.iqr_min.1)),
        ],
    )
}

pub fn build_prompt(
    query: &SurgicalCase,
    refs: Option<&ReferenceSet>,
    prior: Option<&StatisticalPrior>,
    mode: PromptMode,
    schema: &FeatureSchema,
    template: &PromptTemplate,
) -> Result<Prompt, PromptError> {
    let mismatch = |message| Err(PromptError::ModeArgumentMismatch { mode, message });
    match mode {
        PromptMode::ZeroShot if refs.is_some() || prior.is_some() => {
            return mismatch("takes neither references nor a prior")
        }
        PromptMode::RandomFewShot | PromptMode::RagWithoutPrior if refs.is_none() || prior.is_some() => {
            return mismatch("takes references and no prior")
        }
        PromptMode::Rag if refs.is_none() || prior.is_none() => return mismatch("needs references and a prior"),
        _ => {}
    }

    let references_text = match refs {
        Some(r) if !r.is_empty() => {
            let mut cases = String::new();
            for (i, reference) in r.references.iter().enumerate() {
                cases.push_str(&render_reference(&reference.case, reference.similarity, i + 1, schema, template)?);
            }
            template.render("references", &[("cases", &cases)])
        }
        _ => String::new(),
    };
    let statistics_text = prior.map(|p| render_statistics(p, template)).unwrap_or_default();
    let query_text = template.render("query", &[("features", &render_features(query, schema))]);
    let user_text = template.render(
        "user",
        &[("references", &references_text), ("statistics", &statistics_text), ("query", &query_text)],
    );
    let system_text = format!("{}\n{}", template.render("system", &[]).trim_end(), OUTPUT_CONTRACT);

    let prompt = Prompt {
        system_text,
        user_text,
        metadata: PromptMetadata {
            mode,
            query: query.clone(),
            key_attributes: schema.key_attributes.clone(),
            references: refs.map(|r| r.references.clone()).unwrap_or_default(),
            prior: prior.cloned(),
        },
    };
    if prompt.len() > template.max_chars {
        return Err(PromptError::TooLong {
            len: prompt.len(),
            max: template.max_chars,
        });
    }
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{FeatureDef, FeatureKind, Value};

    fn schema() -> FeatureSchema {
        FeatureSchema::new(
            vec![
                FeatureDef { name: "department".into(), kind: FeatureKind::Categorical },
                FeatureDef { name: "age".into(), kind: FeatureKind::Numerical },
            ],
            Default::default(),
            vec!["department".into()],
            "duration_min".into(),
            "case_id".into(),
        )
        .unwrap()
    }

    fn case(id: &str, d: Option<f64>) -> SurgicalCase {
        let mut c = SurgicalCase::new(id)
            .with("department", Value::Text("Thyroid".into()))
            .with("age", Value::Number(57.0));
        c.duration_min = d;
        c
    }

    fn refs(k: usize) -> ReferenceSet {
        ReferenceSet {
            references: (0..k)
                .map(|i| Reference {
                    case: case(&format!("r{i}"), Some(100.0 + i as f64 * 5.0)),
                    similarity: 0.99 - i as f64 * 0.01,
                })
                .collect(),
            fallback_level: 0,
            iqr: None,
        }
    }

    fn prior() -> StatisticalPrior {
        StatisticalPrior::from_durations(&[115.0, 120.0, 125.0, 140.0, 150.0], 0, "department=Thyroid".into())
    }

    #[test]
    fn rag_prompt_structure() {
        let t = PromptTemplate::default();
        let p = build_prompt(&case("q", None), Some(&refs(8)), Some(&prior()), PromptMode::Rag, &schema(), &t).unwrap();
        assert_eq!(p.user_text.matches("Actual duration:").count(), 8);
        assert_eq!(p.user_text.matches("## Statistical prior knowledge").count(), 1);
        assert_eq!(p.user_text.matches("## Query case").count(), 1);
        assert!(p.system_text.ends_with(OUTPUT_CONTRACT));
        let first = p.user_text.find("similarity 0.990").unwrap();
        let second = p.user_text.find("similarity 0.980").unwrap();
        assert!(first < second);
        assert_eq!(p.metadata.k_used(), 8);
        assert!(p.user_text.contains("- median: 125 minutes"));
        assert!(p.user_text.contains("- interquartile range: 120 to 140 minutes"));
    }

    #[test]
    fn zero_shot_has_no_context() {
        let t = PromptTemplate::default();
        let p = build_prompt(&case("q", None), None, None, PromptMode::ZeroShot, &schema(), &t).unwrap();
        assert!(!p.user_text.contains("Actual duration"));
        assert!(!p.user_text.contains("Statistical prior"));
        assert!(p.user_text.contains("## Query case"));
        assert!(p.user_text.contains("Estimate the surgical duration"));
    }

    #[test]
    fn mode_mismatches() {
        let t = PromptTemplate::default();
        let s = schema();
        let q = case("q", None);
        let r = refs(2);
        let pr = prior();
        let err = |m, r, p| build_prompt(&q, r, p, m, &s, &t).unwrap_err();
        assert!(matches!(err(PromptMode::ZeroShot, Some(&r), None), PromptError::ModeArgumentMismatch { .. }));
        assert!(matches!(err(PromptMode::Rag, Some(&r), None), PromptError::ModeArgumentMismatch { .. }));
        assert!(matches!(err(PromptMode::Rag, None, Some(&pr)), PromptError::ModeArgumentMismatch { .. }));
        assert!(matches!(err(PromptMode::RandomFewShot, Some(&r), Some(&pr)), PromptError::ModeArgumentMismatch { .. }));
    }

    #[test]
    fn deterministic_rendering() {
        let t = PromptTemplate::default();
        let a = build_prompt(&case("q", None), Some(&refs(3)), Some(&prior()), PromptMode::Rag, &schema(), &t).unwrap();
        let b = build_prompt(&case("q", None), Some(&refs(3)), Some(&prior()), PromptMode::Rag, &schema(), &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reference_block_formatting() {
        let t = PromptTemplate::default();
        let c = case("r", Some(120.0));
        let block = render_reference(&c, 0.973, 1, &schema(), &t).unwrap();
        assert!(block.contains("0.973"));
        assert!(block.contains("120"));
        assert!(block.contains("- department: Thyroid"));
        assert!(render_reference(&c, 1.0, 1, &schema(), &t).unwrap().contains("1.000"));
        assert_eq!(
            render_reference(&case("r", None), 0.5, 1, &schema(), &t),
            Err(PromptError::MissingDuration("r".into()))
        );
    }

    #[test]
    fn length_limit_errors() {
        let mut t = PromptTemplate::default();
        t.max_chars = 200;
        let r = build_prompt(&case("q", None), Some(&refs(8)), Some(&prior()), PromptMode::Rag, &schema(), &t);
        assert!(matches!(r, Err(PromptError::TooLong { .. })));
    }

    #[test]
    fn template_validation() {
        assert!(matches!(PromptTemplate::parse("[[system]]\nhi\n"), Err(PromptError::Template(_))));
        let bad = DEFAULT_TEMPLATE.replace("{cohort_size}", "{cohort}");
        assert!(matches!(PromptTemplate::parse(&bad), Err(PromptError::Template(_))));
        let braces = DEFAULT_TEMPLATE.replace("[[system]]\n", "[[system]]\nUse {{json}}.\n");
        let t = PromptTemplate::parse(&braces).unwrap();
        let p = build_prompt(&case("q", None), None, None, PromptMode::ZeroShot, &schema(), &t).unwrap();
        assert!(p.system_text.starts_with("Use {json}."));
    }
}
