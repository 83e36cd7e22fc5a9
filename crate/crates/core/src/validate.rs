//! Validation and coercion of raw form submissions.
//!
//! Coercion is deliberately narrow: digit strings become numbers and the
//! strings `"true"`/`"false"` become booleans. Anything else that does not
//! already have the declared kind is `wrong_kind`. Empty strings and `null`
//! count as absent.

use regex::Regex;
use serde_json::{Map, Value};

use crate::clock::Timestamp;
use crate::error::{ValidationCode, ValidationError};
use crate::model::{FieldKind, FieldSpec, FieldValue, FormTemplate, TypedValues};

/// Validates `raw` against `template`, returning the coerced values or one
/// error per violated field.
pub fn validate_submission(
    template: &FormTemplate,
    raw: &Map<String, Value>,
) -> Result<TypedValues, Vec<ValidationError>> {
    let mut errors = Vec::new();
    let mut values = TypedValues::new();

    for field in &template.fields {
        let present = raw.get(&field.name).filter(|v| !is_blank(v));
        let Some(input) = present else {
            if field.required {
                errors.push(ValidationError::new(
                    &field.name,
                    ValidationCode::MissingRequired,
                    format!("'{}' is required", field.name),
                ));
            }
            continue;
        };
        match coerce(field.kind, input) {
            Some(value) => match check(field, &value) {
                Ok(()) => {
                    values.insert(field.name.clone(), value);
                }
                Err(message) => errors.push(ValidationError::new(
                    &field.name,
                    ValidationCode::ConstraintViolation,
                    message,
                )),
            },
            None => errors.push(ValidationError::new(
                &field.name,
                ValidationCode::WrongKind,
                format!("expected {} value, got {input}", field.kind),
            )),
        }
    }

    for name in raw.keys() {
        if template.field(name).is_none() {
            errors.push(ValidationError::new(
                name,
                ValidationCode::UnknownField,
                format!("'{name}' is not a field of template {}", template.template_id),
            ));
        }
    }

    if errors.is_empty() {
        Ok(values)
    } else {
        Err(errors)
    }
}

fn is_blank(v: &Value) -> bool {
    match v {
        Value::Null => true,
        Value::String(s) => s.is_empty(),
        _ => false,
    }
}

fn is_integer_literal(s: &str) -> bool {
    let digits = s.strip_prefix('-').unwrap_or(s);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

fn is_decimal_literal(s: &str) -> bool {
    match s.split_once('.') {
        Some((whole, frac)) => {
            is_integer_literal(whole) && !frac.is_empty() && frac.bytes().all(|b| b.is_ascii_digit())
        }
        None => is_integer_literal(s),
    }
}

/// Coerces one raw value to `kind`; `None` means wrong kind.
pub fn coerce(kind: FieldKind, input: &Value) -> Option<FieldValue> {
    match (kind, input) {
        (FieldKind::Text | FieldKind::Barcode | FieldKind::EnumChoice, Value::String(s)) => {
            Some(FieldValue::Text(s.clone()))
        }
        (FieldKind::Integer, Value::Number(n)) => n.as_i64().or_else(|| {
            n.as_f64()
                .filter(|f| f.fract() == 0.0 && f.abs() < 9.0e15)
                .map(|f| f as i64)
        })
        .map(FieldValue::Integer),
        (FieldKind::Integer, Value::String(s)) if is_integer_literal(s) => {
            s.parse().ok().map(FieldValue::Integer)
        }
        (FieldKind::Decimal, Value::Number(n)) => n.as_f64().map(FieldValue::Decimal),
        (FieldKind::Decimal, Value::String(s)) if is_decimal_literal(s) => {
            s.parse::<f64>().ok().filter(|f| f.is_finite()).map(FieldValue::Decimal)
        }
        (FieldKind::Boolean, Value::Bool(b)) => Some(FieldValue::Boolean(*b)),
        (FieldKind::Boolean, Value::String(s)) => match s.as_str() {
            "true" => Some(FieldValue::Boolean(true)),
            "false" => Some(FieldValue::Boolean(false)),
            _ => None,
        },
        (FieldKind::Timestamp, Value::String(s)) => Timestamp::parse(s).ok().map(FieldValue::Timestamp),
        _ => None,
    }
}

fn check(field: &FieldSpec, value: &FieldValue) -> Result<(), String> {
    let c = &field.constraints;
    let numeric = match value {
        FieldValue::Integer(i) => Some(*i as f64),
        FieldValue::Decimal(d) => Some(*d),
        _ => None,
    };
    if let Some(n) = numeric {
        if let Some(min) = c.min.filter(|min| n < *min) {
            return Err(format!("{value} is below the minimum {min}"));
        }
        if let Some(max) = c.max.filter(|max| n > *max) {
            return Err(format!("{value} is above the maximum {max}"));
        }
    }
    if let FieldValue::Text(s) = value {
        if let Some(choices) = &c.choices {
            if !choices.iter().any(|choice| choice == s) {
                return Err(format!("'{s}' is not one of {}", choices.join(", ")));
            }
        }
        if let Some(re) = &c.regex {
            let anchored = Regex::new(&format!("^(?:{re})$")).map_err(|e| e.to_string())?;
            if !anchored.is_match(s) {
                return Err(format!("'{s}' does not match /{re}/"));
            }
        }
    }
    Ok(())
}
