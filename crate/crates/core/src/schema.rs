//! Dataset contract: feature schema, case records and CSV ingestion.
//!
//! A schema is declared in TOML:
//!
//! ```toml
//! duration_column = "duration_min"   # optional, this is the default
//! id_column = "case_id"              # optional, this is the default
//! key_attributes = ["department", "surgery_name", "surgery_level"]
//!
//! [[features]]
//! name = "age"
//! kind = "numerical"
//!
//! [[features]]
//! name = "surgery_level"
//! kind = "ordinal"
//! order = ["I", "II", "III", "IV"]
//! ```
//!
//! `kind` is one of `numerical`, `ordinal`, `categorical`, `boolean`, `text`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DURATION_COLUMN: &str = "duration_min";
pub const DEFAULT_ID_COLUMN: &str = "case_id";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("malformed schema config: {0}")]
    Parse(String),
    #[error("invalid schema: {0}")]
    Invalid(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("CSV error: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numerical,
    Ordinal,
    Categorical,
    Boolean,
    Text,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 5] = [
        FeatureKind::Numerical,
        FeatureKind::Ordinal,
        FeatureKind::Categorical,
        FeatureKind::Boolean,
        FeatureKind::Text,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Numerical => "numerical",
            FeatureKind::Ordinal => "ordinal",
            FeatureKind::Categorical => "categorical",
            FeatureKind::Boolean => "boolean",
            FeatureKind::Text => "text",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureDef>,
    pub ordinal_orders: BTreeMap<String, Vec<String>>,
    pub key_attributes: Vec<String>,
    pub duration_column: String,
    pub id_column: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    #[serde(default)]
    duration_column: Option<String>,
    #[serde(default)]
    id_column: Option<String>,
    #[serde(default)]
    key_attributes: Vec<String>,
    features: Vec<RawFeature>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFeature {
    name: String,
    kind: FeatureKind,
    #[serde(default)]
    order: Option<Vec<String>>,
}

/// Parses and validates a TOML schema declaration.
pub fn load_schema(config_text: &str) -> Result<FeatureSchema, SchemaError> {
    let raw: RawSchema =
        toml::from_str(config_text).map_err(|e| SchemaError::Parse(e.to_string()))?;
    let mut features = Vec::with_capacity(raw.features.len());
    let mut ordinal_orders = BTreeMap::new();
    for f in raw.features {
        match (f.kind, f.order) {
            (FeatureKind::Ordinal, Some(order)) => {
                ordinal_orders.insert(f.name.clone(), order);
            }
            (FeatureKind::Ordinal, None) => {
                return Err(SchemaError::Invalid(format!(
                    "ordinal feature '{}' has no declared order",
                    f.name
                )))
            }
            (kind, Some(_)) => {
                return Err(SchemaError::Invalid(format!(
                    "feature '{}' of kind {kind} cannot declare an order",
                    f.name
                )))
            }
            (_, None) => {}
        }
        features.push(FeatureDef {
            name: f.name,
            kind: f.kind,
        });
    }
    FeatureSchema::new(
        features,
        ordinal_orders,
        raw.key_attributes,
        raw.duration_column
            .unwrap_or_else(|| DEFAULT_DURATION_COLUMN.to_string()),
        raw.id_column.unwrap_or_else(|| DEFAULT_ID_COLUMN.to_string()),
    )
}

pub fn load_schema_file(path: impl AsRef<Path>) -> Result<FeatureSchema, SchemaError> {
    load_schema(&std::fs::read_to_string(path)?)
}

impl FeatureSchema {
    pub fn new(
        features: Vec<FeatureDef>,
        ordinal_orders: BTreeMap<String, Vec<String>>,
        key_attributes: Vec<String>,
        duration_column: String,
        id_column: String,
    ) -> Result<Self, SchemaError> {
        let schema = FeatureSchema {
            features,
            ordinal_orders,
            key_attributes,
            duration_column,
            id_column,
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<(), SchemaError> {
        let invalid = |m: String| Err(SchemaError::Invalid(m));
        if self.features.is_empty() {
            return invalid("schema declares no features".into());
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if f.name.trim().is_empty() {
                return invalid("feature name must not be empty".into());
            }
            if !seen.insert(f.name.as_str()) {
                return invalid(format!("duplicate feature name '{}'", f.name));
            }
            if f.name == self.duration_column || f.name == self.id_column {
                return invalid(format!(
                    "feature '{}' collides with the id or duration column",
                    f.name
                ));
            }
            if f.kind == FeatureKind::Ordinal {
                match self.ordinal_orders.get(&f.name) {
                    None => return invalid(format!("ordinal feature '{}' has no order", f.name)),
                    Some(levels) if levels.is_empty() => {
                        return invalid(format!("ordinal feature '{}' has an empty order", f.name))
                    }
                    Some(levels) => {
                        let distinct: HashSet<_> = levels.iter().collect();
                        if distinct.len() != levels.len() {
                            return invalid(format!(
                                "ordinal feature '{}' repeats a level",
                                f.name
                            ));
                        }
                    }
                }
            }
        }
        for name in self.ordinal_orders.keys() {
            if self.kind_of(name) != Some(FeatureKind::Ordinal) {
                return invalid(format!("order declared for non-ordinal feature '{name}'"));
            }
        }
        let mut keys = HashSet::new();
        for k in &self.key_attributes {
            if self.kind_of(k).is_none() {
                return invalid(format!("key attribute '{k}' is not a declared feature"));
            }
            if !keys.insert(k) {
                return invalid(format!("key attribute '{k}' listed twice"));
            }
        }
        if self.duration_column == self.id_column {
            return invalid("id and duration columns must differ".into());
        }
        Ok(())
    }

    pub fn kind_of(&self, name: &str) -> Option<FeatureKind> {
        self.features.iter().find(|f| f.name == name).map(|f| f.kind)
    }

    pub fn features_of(&self, kind: FeatureKind) -> impl Iterator<Item = &FeatureDef> {
        self.features.iter().filter(move |f| f.kind == kind)
    }

    /// The first key attribute plays the role of the department.
    pub fn department_attribute(&self) -> Option<&str> {
        self.key_attributes.first().map(String::as_str)
    }

    /// Serializes back to the TOML declaration format.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("duration_column = {:?}\n", self.duration_column));
        out.push_str(&format!("id_column = {:?}\n", self.id_column));
        let keys: Vec<String> = self.key_attributes.iter().map(|k| format!("{k:?}")).collect();
        out.push_str(&format!("key_attributes = [{}]\n", keys.join(", ")));
        for f in &self.features {
            out.push_str(&format!("\n[[features]]\nname = {:?}\nkind = \"{}\"\n", f.name, f.kind));
            if let Some(order) = self.ordinal_orders.get(&f.name) {
                let levels: Vec<String> = order.iter().map(|l| format!("{l:?}")).collect();
                out.push_str(&format!("order = [{}]\n", levels.join(", ")));
            }
        }
        out
    }
}

/// A raw feature value as it appears in a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Text(String),
    Missing,
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            _ => None,
        }
    }

    /// Text form used for matching and rendering; `None` when missing.
    pub fn as_text(&self) -> Option<String> {
        match self {
            Value::Number(x) => Some(format_number(*x)),
            Value::Text(s) => Some(s.clone()),
            Value::Missing => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(x) => f.write_str(&format_number(*x)),
            Value::Text(s) => f.write_str(s),
            Value::Missing => Ok(()),
        }
    }
}

pub(crate) fn format_number(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgicalCase {
    pub id: String,
    pub values: BTreeMap<String, Value>,
    pub duration_min: Option<f64>,
}

impl SurgicalCase {
    pub fn new(id: impl Into<String>) -> Self {
        SurgicalCase {
            id: id.into(),
            values: BTreeMap::new(),
            duration_min: None,
        }
    }

    pub fn with(mut self, name: &str, value: Value) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn with_duration(mut self, minutes: f64) -> Self {
        self.duration_min = Some(minutes);
        self
    }

    pub fn value(&self, name: &str) -> &Value {
        self.values.get(name).unwrap_or(&Value::Missing)
    }

    /// Checks that every value belongs to a declared feature and that the
    /// duration, when present, is positive.
    pub fn conforms_to(&self, schema: &FeatureSchema) -> Result<(), String> {
        for (name, value) in &self.values {
            let Some(kind) = schema.kind_of(name) else {
                return Err(format!("unknown feature '{name}'"));
            };
            match (kind, value) {
                (FeatureKind::Numerical, Value::Text(t)) => {
                    return Err(format!("numerical feature '{name}' holds text '{t}'"))
                }
                (FeatureKind::Ordinal, v) if !v.is_missing() => {
                    let level = v.as_text().unwrap_or_default();
                    if !schema.ordinal_orders[name].contains(&level) {
                        return Err(format!("ordinal feature '{name}' has undeclared level '{level}'"));
                    }
                }
                _ => {}
            }
        }
        if let Some(d) = self.duration_min {
            if !(d.is_finite() && d > 0.0) {
                return Err(format!("duration must be positive, got {d}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSet {
    pub schema: FeatureSchema,
    pub cases: Vec<SurgicalCase>,
}

impl CaseSet {
    pub fn new(schema: FeatureSchema, cases: Vec<SurgicalCase>) -> Result<Self, SchemaError> {
        for (i, c) in cases.iter().enumerate() {
            c.conforms_to(&schema)
                .map_err(|message| SchemaError::Row { row: i + 1, message })?;
        }
        Ok(CaseSet { schema, cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Durations of every case that has one, in case order.
    pub fn durations(&self) -> Vec<f64> {
        self.cases.iter().filter_map(|c| c.duration_min).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SchemaError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![self.schema.id_column.clone()];
        header.extend(self.schema.features.iter().map(|f| f.name.clone()));
        header.push(self.schema.duration_column.clone());
        w.write_record(&header).map_err(csv_err)?;
        for c in &self.cases {
            let mut row = vec![c.id.clone()];
            row.extend(self.schema.features.iter().map(|f| c.value(&f.name).to_string()));
            row.push(c.duration_min.map(format_number).unwrap_or_default());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<(), SchemaError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn csv_err(e: csv::Error) -> SchemaError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SchemaError::Io(io),
        other => SchemaError::Csv(format!("{other:?}")),
    }
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<CaseSet, SchemaError> {
    let file = std::fs::File::open(path)?;
    ingest_csv_reader(file, schema)
}

/// Reads cases from CSV. Row numbers in errors count data rows from 1.
/// Blank cells become [`Value::Missing`]; the id column is optional and
/// defaults to `row-<n>`; the duration column may be absent for query files.
pub fn ingest_csv_reader<R: Read>(reader: R, schema: &FeatureSchema) -> Result<CaseSet, SchemaError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col(&schema.id_column);
    let dur_col = col(&schema.duration_column);
    let mut feature_cols = Vec::with_capacity(schema.features.len());
    for f in &schema.features {
        let idx = col(&f.name).ok_or_else(|| {
            SchemaError::Invalid(format!("CSV header lacks feature column '{}'", f.name))
        })?;
        feature_cols.push((f, idx));
    }

    let mut cases = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| SchemaError::Row {
            row,
            message: e.to_string(),
        })?;
        let id = id_col
            .and_then(|c| record.get(c))
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| format!("row-{row}"));
        let mut case = SurgicalCase::new(id);
        for (f, idx) in &feature_cols {
            let cell = record.get(*idx).unwrap_or("");
            let value = if cell.is_empty() {
                Value::Missing
            } else if f.kind == FeatureKind::Numerical {
                Value::Number(parse_number(cell).ok_or_else(|| SchemaError::Row {
                    row,
                    message: format!("feature '{}': '{cell}' is not a number", f.name),
                })?)
            } else {
                Value::Text(cell.to_string())
            };
            case.values.insert(f.name.clone(), value);
        }
        if let Some(c) = dur_col {
            let cell = record.get(c).unwrap_or("");
            if !cell.is_empty() {
                let d = parse_number(cell).ok_or_else(|| SchemaError::Row {
                    row,
                    message: format!("duration '{cell}' is not a number"),
                })?;
                case.duration_min = Some(d);
            }
        }
        case.conforms_to(schema)
            .map_err(|message| SchemaError::Row { row, message })?;
        cases.push(case);
    }
    Ok(CaseSet {
        schema: schema.clone(),
        cases,
    })
}

fn parse_number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}
