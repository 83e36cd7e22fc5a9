//! Domain types shared by the server and the agent.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::clock::Timestamp;

/// The fixed v1 vocabulary of form field kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Text,
    Integer,
    Decimal,
    Boolean,
    EnumChoice,
    Timestamp,
    Barcode,
}

impl FieldKind {
    pub const ALL: [FieldKind; 7] = [
        FieldKind::Text,
        FieldKind::Integer,
        FieldKind::Decimal,
        FieldKind::Boolean,
        FieldKind::EnumChoice,
        FieldKind::Timestamp,
        FieldKind::Barcode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Text => "text",
            FieldKind::Integer => "integer",
            FieldKind::Decimal => "decimal",
            FieldKind::Boolean => "boolean",
            FieldKind::EnumChoice => "enum_choice",
            FieldKind::Timestamp => "timestamp",
            FieldKind::Barcode => "barcode",
        }
    }

    pub fn parse(s: &str) -> Option<FieldKind> {
        FieldKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, FieldKind::Integer | FieldKind::Decimal)
    }

    pub fn is_textual(self) -> bool {
        matches!(self, FieldKind::Text | FieldKind::Barcode)
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

impl Constraints {
    pub fn is_empty(&self) -> bool {
        self.min.is_none() && self.max.is_none() && self.regex.is_none() && self.choices.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(default)]
    pub label: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Constraints::is_empty")]
    pub constraints: Constraints,
}

/// A compiled form template. Only [`crate::compile_template`] produces
/// values that are guaranteed to satisfy the template invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormTemplate {
    pub template_id: String,
    pub version: u64,
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub file_id_pattern: String,
    #[serde(default)]
    pub expected_file_kinds: Vec<String>,
}

impl FormTemplate {
    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Online,
    Offline,
}

/// How a protocol binds instrument files to submitted records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkageStrategy {
    /// The expected file name is generated from the record's metadata.
    IdPattern,
    /// Files that appear or change after the submission are linked.
    #[default]
    ChangeDetection,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemplateRef {
    pub template_id: String,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionProtocol {
    pub protocol_id: String,
    pub study_id: String,
    pub site_id: String,
    pub instrument_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approach_id: Option<String>,
    pub sampling_mode: SamplingMode,
    pub template: TemplateRef,
    #[serde(default)]
    pub linkage: LinkageStrategy,
    #[serde(default)]
    pub watch_directory_hint: String,
    #[serde(default)]
    pub notification_topics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub site_id: String,
    pub name: String,
}

/// A group of instrument protocols sharing one breath-sampling approach.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingApproach {
    pub approach_id: String,
    pub name: String,
    pub sampling_mode: SamplingMode,
    #[serde(default)]
    pub description: String,
}

/// Notification subscription, stored in the config catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub subscription_id: String,
    /// Exact topic, or a prefix ending in `.*`.
    pub topic: String,
    pub plugin: String,
    #[serde(default)]
    pub recipients: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub params: serde_json::Map<String, serde_json::Value>,
}

/// A coerced form value.
///
/// On the wire a value is plain JSON (timestamps as RFC 3339 strings), so a
/// deserialized value is only kind-accurate after re-validation against its
/// template.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Text(String),
    Integer(i64),
    Decimal(f64),
    Boolean(bool),
    Timestamp(Timestamp),
}

impl FieldValue {
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            FieldValue::Text(s) => serde_json::Value::String(s.clone()),
            FieldValue::Integer(i) => serde_json::Value::from(*i),
            FieldValue::Decimal(d) => serde_json::Value::from(*d),
            FieldValue::Boolean(b) => serde_json::Value::Bool(*b),
            FieldValue::Timestamp(t) => serde_json::Value::String(t.to_string()),
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            FieldValue::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Text(s) => f.write_str(s),
            FieldValue::Integer(i) => write!(f, "{i}"),
            FieldValue::Decimal(d) => write!(f, "{d}"),
            FieldValue::Boolean(b) => write!(f, "{b}"),
            FieldValue::Timestamp(t) => write!(f, "{t}"),
        }
    }
}

impl Serialize for FieldValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FieldValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        match serde_json::Value::deserialize(deserializer)? {
            serde_json::Value::String(s) => Ok(FieldValue::Text(s)),
            serde_json::Value::Bool(b) => Ok(FieldValue::Boolean(b)),
            serde_json::Value::Number(n) => match n.as_i64() {
                Some(i) => Ok(FieldValue::Integer(i)),
                None => n
                    .as_f64()
                    .map(FieldValue::Decimal)
                    .ok_or_else(|| D::Error::custom("number out of range")),
            },
            other => Err(D::Error::custom(format!("unsupported field value {other}"))),
        }
    }
}

pub type TypedValues = BTreeMap<String, FieldValue>;

/// Converts typed values back into the raw map shape accepted by validation.
pub fn values_to_raw(values: &TypedValues) -> serde_json::Map<String, serde_json::Value> {
    values
        .iter()
        .map(|(k, v)| (k.clone(), v.to_json()))
        .collect()
}

/// One validated form submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    /// Assigned by the server; absent on records that have not been ingested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    pub idempotency_key: String,
    pub protocol_id: String,
    pub template_version: u64,
    pub values: TypedValues,
    pub collected_at: Timestamp,
    #[serde(default)]
    pub collector: String,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileArtifact {
    pub artifact_id: String,
    pub generated_file_id: String,
    pub content_hash: String,
    pub size_bytes: u64,
    pub original_path: String,
    pub captured_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMethod {
    IdPattern,
    ChangeDetection,
    Manual,
}

impl From<LinkageStrategy> for LinkMethod {
    fn from(s: LinkageStrategy) -> Self {
        match s {
            LinkageStrategy::IdPattern => LinkMethod::IdPattern,
            LinkageStrategy::ChangeDetection => LinkMethod::ChangeDetection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinkageRecord {
    pub record_id: String,
    pub artifact_id: String,
    pub link_method: LinkMethod,
}

/// True for identifiers used as document ids (`[A-Za-z0-9._-]+`).
pub fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_value_wire_shape() {
        let mut values = TypedValues::new();
        values.insert("n".into(), FieldValue::Integer(3));
        values.insert("d".into(), FieldValue::Decimal(1.5));
        values.insert(
            "t".into(),
            FieldValue::Timestamp(Timestamp::parse("2026-01-02T03:04:05Z").unwrap()),
        );
        let json = serde_json::to_string(&values).unwrap();
        assert_eq!(json, r#"{"d":1.5,"n":3,"t":"2026-01-02T03:04:05.000Z"}"#);
        let back: TypedValues = serde_json::from_str(&json).unwrap();
        assert_eq!(back["n"], FieldValue::Integer(3));
        assert_eq!(back["t"], FieldValue::Text("2026-01-02T03:04:05.000Z".into()));
    }

    #[test]
    fn identifiers() {
        assert!(is_identifier("EMBER-site_1.a"));
        assert!(!is_identifier(""));
        assert!(!is_identifier("a/b"));
        assert!(!is_identifier("a b"));
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in FieldKind::ALL {
            assert_eq!(FieldKind::parse(kind.as_str()), Some(kind));
            let json = serde_json::to_value(kind).unwrap();
            assert_eq!(json, serde_json::Value::String(kind.as_str().into()));
        }
        assert_eq!(FieldKind::parse("float"), None);
    }
}
