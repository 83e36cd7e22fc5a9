use std::fmt;

use serde::{Deserialize, Serialize};

/// Category of a validation failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationCode {
    MissingRequired,
    WrongKind,
    ConstraintViolation,
    UnknownField,
    BadPattern,
}

impl ValidationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ValidationCode::MissingRequired => "missing_required",
            ValidationCode::WrongKind => "wrong_kind",
            ValidationCode::ConstraintViolation => "constraint_violation",
            ValidationCode::UnknownField => "unknown_field",
            ValidationCode::BadPattern => "bad_pattern",
        }
    }
}

/// One problem found in a template or a submission.
///
/// `field` is empty for template-level problems; `bad_pattern` is always
/// template-level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ValidationError {
    pub field: String,
    pub code: ValidationCode,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, code: ValidationCode, message: impl Into<String>) -> Self {
        let field = if code == ValidationCode::BadPattern {
            String::new()
        } else {
            field.into()
        };
        Self {
            field,
            code,
            message: message.into(),
        }
    }

    pub fn template(code: ValidationCode, message: impl Into<String>) -> Self {
        Self::new("", code, message)
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}: {}", self.code.as_str(), self.message)
        } else {
            write!(f, "{} [{}]: {}", self.code.as_str(), self.field, self.message)
        }
    }
}

impl std::error::Error for ValidationError {}
