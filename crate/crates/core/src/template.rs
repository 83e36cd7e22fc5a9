//! Compilation of raw template documents into [`FormTemplate`]s.

use std::collections::HashSet;

use regex::Regex;
use serde::Deserialize;

use crate::error::{ValidationCode, ValidationError};
use crate::file_id::{FilePattern, BUILTIN_NAMES};
use crate::model::{is_identifier, Constraints, FieldKind, FieldSpec, FormTemplate};

#[derive(Debug, Deserialize)]
struct RawTemplate {
    template_id: String,
    #[serde(default)]
    version: Option<u64>,
    #[serde(default)]
    fields: Vec<RawField>,
    #[serde(default)]
    file_id_pattern: String,
    #[serde(default)]
    expected_file_kinds: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawField {
    name: String,
    #[serde(default)]
    label: String,
    kind: String,
    #[serde(default)]
    required: bool,
    #[serde(default)]
    constraints: Option<Constraints>,
}

fn is_field_name(name: &str) -> bool {
    let mut bytes = name.bytes();
    matches!(bytes.next(), Some(b'a'..=b'z'))
        && bytes.all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// Compiles a raw template document, reporting every violation found.
///
/// A missing `version` defaults to 1; the server overwrites it on upsert.
pub fn compile_template(raw: &serde_json::Value) -> Result<FormTemplate, Vec<ValidationError>> {
    let raw: RawTemplate = serde_json::from_value(raw.clone()).map_err(|e| {
        vec![ValidationError::template(
            ValidationCode::WrongKind,
            format!("malformed template document: {e}"),
        )]
    })?;

    let mut errors = Vec::new();
    let constraint = |field: &str, message: String| {
        ValidationError::new(field, ValidationCode::ConstraintViolation, message)
    };

    if !is_identifier(&raw.template_id) {
        errors.push(constraint(
            "",
            format!("template_id '{}' is not a valid identifier", raw.template_id),
        ));
    }
    let version = raw.version.unwrap_or(1);
    if version == 0 {
        errors.push(constraint("", "version must be positive".into()));
    }

    let mut seen = HashSet::new();
    let mut fields = Vec::with_capacity(raw.fields.len());
    for field in raw.fields {
        let name = field.name;
        if !is_field_name(&name) {
            errors.push(constraint(&name, format!("field name '{name}' must match [a-z][a-z0-9_]*")));
        } else if BUILTIN_NAMES.contains(&name.as_str()) {
            errors.push(constraint(&name, format!("field name '{name}' is reserved for a builtin")));
        }
        if !seen.insert(name.clone()) {
            errors.push(ValidationError::new(
                &name,
                ValidationCode::UnknownField,
                format!("duplicate field name '{name}'"),
            ));
        }
        let Some(kind) = FieldKind::parse(&field.kind) else {
            errors.push(ValidationError::new(
                &name,
                ValidationCode::WrongKind,
                format!("unknown field kind '{}'", field.kind),
            ));
            continue;
        };
        let constraints = field.constraints.unwrap_or_default();
        check_constraints(&name, kind, &constraints, &mut errors);
        fields.push(FieldSpec {
            name,
            label: field.label,
            kind,
            required: field.required,
            constraints,
        });
    }

    match FilePattern::parse(&raw.file_id_pattern) {
        Ok(pattern) => {
            for placeholder in pattern.placeholders() {
                if !seen.contains(placeholder) && !BUILTIN_NAMES.contains(&placeholder) {
                    errors.push(ValidationError::template(
                        ValidationCode::BadPattern,
                        format!("placeholder '{placeholder}' names no declared field or builtin"),
                    ));
                }
            }
        }
        Err(e) => errors.push(e),
    }

    for kind in &raw.expected_file_kinds {
        if glob::Pattern::new(kind).is_err() {
            errors.push(constraint("", format!("invalid file glob '{kind}'")));
        }
    }

    if errors.is_empty() {
        Ok(FormTemplate {
            template_id: raw.template_id,
            version,
            fields,
            file_id_pattern: raw.file_id_pattern,
            expected_file_kinds: raw.expected_file_kinds,
        })
    } else {
        Err(errors)
    }
}

fn check_constraints(name: &str, kind: FieldKind, c: &Constraints, errors: &mut Vec<ValidationError>) {
    let mut problems = Vec::new();
    match (&c.choices, kind) {
        (None, FieldKind::EnumChoice) => problems.push("enum_choice requires a choice list".to_string()),
        (Some(choices), FieldKind::EnumChoice) => {
            if choices.is_empty() {
                problems.push("enum_choice requires a non-empty choice list".into());
            }
            let unique: HashSet<_> = choices.iter().collect();
            if unique.len() != choices.len() {
                problems.push("choice list contains duplicates".into());
            }
        }
        (Some(_), _) => problems.push(format!("{kind} fields cannot declare choices")),
        (None, _) => {}
    }
    if (c.min.is_some() || c.max.is_some()) && !kind.is_numeric() {
        problems.push(format!("{kind} fields cannot declare min/max"));
    }
    if let (Some(min), Some(max)) = (c.min, c.max) {
        if min > max {
            problems.push(format!("min {min} exceeds max {max}"));
        }
    }
    if let Some(re) = &c.regex {
        if !kind.is_textual() {
            problems.push(format!("{kind} fields cannot declare a regex"));
        } else if let Err(e) = Regex::new(re) {
            problems.push(format!("invalid regex: {e}"));
        }
    }
    if !problems.is_empty() {
        errors.push(ValidationError::new(
            name,
            ValidationCode::ConstraintViolation,
            problems.join("; "),
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ember() -> serde_json::Value {
        json!({
            "template_id": "ember-breath",
            "fields": [
                {"name": "participant", "label": "Participant", "kind": "text", "required": true},
                {"name": "bag", "label": "Bag", "kind": "enum_choice", "constraints": {"choices": ["A", "B"]}}
            ],
            "file_id_pattern": "{study}-{participant}-{seq:3}",
            "expected_file_kinds": ["*.csv"]
        })
    }

    #[test]
    fn compiles_ember_style_template() {
        let t = compile_template(&ember()).unwrap();
        assert_eq!(t.version, 1);
        assert_eq!(t.fields.len(), 2);
        assert_eq!(t.fields[1].kind, FieldKind::EnumChoice);
        assert!(t.fields[0].required);
    }

    #[test]
    fn empty_template_is_valid() {
        let t = compile_template(&json!({"template_id": "t", "fields": [], "file_id_pattern": ""})).unwrap();
        assert!(t.fields.is_empty());
        assert!(t.file_id_pattern.is_empty());
    }

    #[test]
    fn undeclared_placeholder_names_the_culprit() {
        let errs = compile_template(&json!({"template_id": "t", "file_id_pattern": "{nonexistent}"})).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].code, ValidationCode::BadPattern);
        assert!(errs[0].field.is_empty());
        assert!(errs[0].message.contains("nonexistent"));
    }

    #[test]
    fn duplicates_are_unknown_field() {
        let errs = compile_template(&json!({
            "template_id": "t",
            "fields": [{"name": "a", "kind": "text"}, {"name": "a", "kind": "integer"}]
        }))
        .unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].code, ValidationCode::UnknownField);
        assert_eq!(errs[0].field, "a");
    }

    #[test]
    fn reports_every_violation() {
        let errs = compile_template(&json!({
            "template_id": "t",
            "version": 0,
            "fields": [
                {"name": "Bad", "kind": "text"},
                {"name": "colour", "kind": "enum_choice", "constraints": {"choices": []}},
                {"name": "puffs", "kind": "integer", "constraints": {"choices": ["1"]}},
                {"name": "weight", "kind": "decimal", "constraints": {"min": 5, "max": 1}},
                {"name": "code", "kind": "text", "constraints": {"regex": "("}},
                {"name": "what", "kind": "float"},
                {"name": "seq", "kind": "integer"}
            ],
            "file_id_pattern": "{missing}-{seq:3}",
            "expected_file_kinds": ["[*.csv"]
        }))
        .unwrap_err();
        let summary: Vec<(&str, ValidationCode)> =
            errs.iter().map(|e| (e.field.as_str(), e.code)).collect();
        assert_eq!(
            summary,
            vec![
                ("", ValidationCode::ConstraintViolation),
                ("Bad", ValidationCode::ConstraintViolation),
                ("colour", ValidationCode::ConstraintViolation),
                ("puffs", ValidationCode::ConstraintViolation),
                ("weight", ValidationCode::ConstraintViolation),
                ("code", ValidationCode::ConstraintViolation),
                ("what", ValidationCode::WrongKind),
                ("seq", ValidationCode::ConstraintViolation),
                ("", ValidationCode::BadPattern),
                ("", ValidationCode::ConstraintViolation),
            ]
        );
    }

    #[test]
    fn malformed_document_is_rejected() {
        let errs = compile_template(&json!({"fields": 3})).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].field.is_empty());
    }
}
