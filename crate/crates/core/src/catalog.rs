//! Configuration documents held in the versioned catalog.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ValidationCode, ValidationError};
use crate::model::{
    is_identifier, CollectionProtocol, FormTemplate, SamplingApproach, Site, Subscription,
};
use crate::template::compile_template;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigKind {
    Site,
    Approach,
    Template,
    Protocol,
    Subscription,
}

impl ConfigKind {
    /// Load order satisfying references (protocols cite templates).
    pub const LOAD_ORDER: [ConfigKind; 5] = [
        ConfigKind::Site,
        ConfigKind::Approach,
        ConfigKind::Template,
        ConfigKind::Protocol,
        ConfigKind::Subscription,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigKind::Site => "site",
            ConfigKind::Approach => "approach",
            ConfigKind::Template => "template",
            ConfigKind::Protocol => "protocol",
            ConfigKind::Subscription => "subscription",
        }
    }
}

impl fmt::Display for ConfigKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConfigKind::LOAD_ORDER
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown config kind '{s}'"))
    }
}

/// A validated configuration document.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigDocument {
    Site(Site),
    Approach(SamplingApproach),
    Template(FormTemplate),
    Protocol(CollectionProtocol),
    Subscription(Subscription),
}

fn parse_as<T: serde::de::DeserializeOwned>(kind: ConfigKind, raw: &Value) -> Result<T, Vec<ValidationError>> {
    serde_json::from_value(strip_kind(raw)).map_err(|e| {
        vec![ValidationError::template(
            ValidationCode::WrongKind,
            format!("malformed {kind} document: {e}"),
        )]
    })
}

fn strip_kind(raw: &Value) -> Value {
    let mut raw = raw.clone();
    if let Some(obj) = raw.as_object_mut() {
        obj.remove("kind");
    }
    raw
}

fn require_identifier(errors: &mut Vec<ValidationError>, name: &str, value: &str) {
    if !is_identifier(value) {
        errors.push(ValidationError::new(
            name,
            ValidationCode::ConstraintViolation,
            format!("'{value}' is not a valid identifier"),
        ));
    }
}

impl ConfigDocument {
    /// Parses and validates a document of the given kind. A `kind` member in
    /// the body, if present, must agree.
    pub fn parse(kind: ConfigKind, raw: &Value) -> Result<Self, Vec<ValidationError>> {
        if let Some(declared) = raw.get("kind").and_then(Value::as_str) {
            if declared != kind.as_str() {
                return Err(vec![ValidationError::template(
                    ValidationCode::WrongKind,
                    format!("document declares kind '{declared}', expected '{kind}'"),
                )]);
            }
        }
        let mut errors = Vec::new();
        let doc = match kind {
            ConfigKind::Template => ConfigDocument::Template(compile_template(&strip_kind(raw))?),
            ConfigKind::Site => {
                let site: Site = parse_as(kind, raw)?;
                require_identifier(&mut errors, "site_id", &site.site_id);
                ConfigDocument::Site(site)
            }
            ConfigKind::Approach => {
                let approach: SamplingApproach = parse_as(kind, raw)?;
                require_identifier(&mut errors, "approach_id", &approach.approach_id);
                ConfigDocument::Approach(approach)
            }
            ConfigKind::Protocol => {
                let p: CollectionProtocol = parse_as(kind, raw)?;
                require_identifier(&mut errors, "protocol_id", &p.protocol_id);
                require_identifier(&mut errors, "study_id", &p.study_id);
                require_identifier(&mut errors, "site_id", &p.site_id);
                require_identifier(&mut errors, "instrument_id", &p.instrument_id);
                require_identifier(&mut errors, "template", &p.template.template_id);
                if let Some(a) = &p.approach_id {
                    require_identifier(&mut errors, "approach_id", a);
                }
                if p.template.version == 0 {
                    errors.push(ValidationError::new(
                        "template",
                        ValidationCode::ConstraintViolation,
                        "template version must be positive",
                    ));
                }
                let hint = std::path::Path::new(&p.watch_directory_hint);
                if hint.is_absolute()
                    || hint.components().any(|c| matches!(c, std::path::Component::ParentDir))
                {
                    errors.push(ValidationError::new(
                        "watch_directory_hint",
                        ValidationCode::ConstraintViolation,
                        "watch directory hint must be a relative path inside the watch root",
                    ));
                }
                ConfigDocument::Protocol(p)
            }
            ConfigKind::Subscription => {
                let s: Subscription = parse_as(kind, raw)?;
                require_identifier(&mut errors, "subscription_id", &s.subscription_id);
                if s.topic.is_empty() {
                    errors.push(ValidationError::new(
                        "topic",
                        ValidationCode::ConstraintViolation,
                        "topic pattern must not be empty",
                    ));
                }
                if s.plugin == "email" && s.recipients.is_empty() {
                    errors.push(ValidationError::new(
                        "recipients",
                        ValidationCode::ConstraintViolation,
                        "email subscriptions need at least one recipient",
                    ));
                }
                ConfigDocument::Subscription(s)
            }
        };
        if errors.is_empty() {
            Ok(doc)
        } else {
            Err(errors)
        }
    }

    pub fn kind(&self) -> ConfigKind {
        match self {
            ConfigDocument::Site(_) => ConfigKind::Site,
            ConfigDocument::Approach(_) => ConfigKind::Approach,
            ConfigDocument::Template(_) => ConfigKind::Template,
            ConfigDocument::Protocol(_) => ConfigKind::Protocol,
            ConfigDocument::Subscription(_) => ConfigKind::Subscription,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            ConfigDocument::Site(s) => &s.site_id,
            ConfigDocument::Approach(a) => &a.approach_id,
            ConfigDocument::Template(t) => &t.template_id,
            ConfigDocument::Protocol(p) => &p.protocol_id,
            ConfigDocument::Subscription(s) => &s.subscription_id,
        }
    }

    /// JSON body including the `kind` discriminator.
    pub fn to_json(&self) -> Value {
        let mut body = match self {
            ConfigDocument::Site(d) => serde_json::to_value(d),
            ConfigDocument::Approach(d) => serde_json::to_value(d),
            ConfigDocument::Template(d) => serde_json::to_value(d),
            ConfigDocument::Protocol(d) => serde_json::to_value(d),
            ConfigDocument::Subscription(d) => serde_json::to_value(d),
        }
        .expect("config documents serialize");
        if let Some(obj) = body.as_object_mut() {
            obj.insert("kind".into(), Value::String(self.kind().as_str().into()));
        }
        body
    }

    pub fn set_template_version(&mut self, version: u64) {
        if let ConfigDocument::Template(t) = self {
            t.version = version;
        }
    }
}

/// One stored version of a catalog document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedDocument {
    pub kind: ConfigKind,
    pub id: String,
    pub version: u64,
    /// Catalog version at which this document version was written.
    pub global_version: u64,
    pub document: Value,
}

impl VersionedDocument {
    pub fn parse(&self) -> Result<ConfigDocument, Vec<ValidationError>> {
        ConfigDocument::parse(self.kind, &self.document)
    }
}
