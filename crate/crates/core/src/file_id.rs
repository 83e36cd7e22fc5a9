//! File-ID patterns such as `{study}-{participant}-{seq:3}`.
//!
//! A pattern is literal text with `{name}` or `{seq:N}` placeholders.
//! Placeholders resolve against form values or the builtins `seq`, `date`,
//! `site` and `study`. The expanded string is sanitized to `[A-Za-z0-9._-]`.

use chrono::NaiveDate;

use crate::error::{ValidationCode, ValidationError};
use crate::model::{FieldValue, TypedValues};

pub const BUILTIN_NAMES: [&str; 4] = ["seq", "date", "site", "study"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Placeholder { name: String, width: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FilePattern {
    segments: Vec<Segment>,
}

/// Values available to every pattern regardless of template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Builtins {
    pub study: String,
    pub site: String,
    pub date: NaiveDate,
    pub seq: u64,
}

fn bad(message: impl Into<String>) -> ValidationError {
    ValidationError::template(ValidationCode::BadPattern, message)
}

impl FilePattern {
    /// Parses pattern syntax. Placeholder names are not checked here.
    pub fn parse(pattern: &str) -> Result<Self, ValidationError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut chars = pattern.char_indices();
        while let Some((at, c)) = chars.next() {
            match c {
                '{' => {
                    let mut inner = String::new();
                    let mut closed = false;
                    for (_, c) in chars.by_ref() {
                        match c {
                            '}' => {
                                closed = true;
                                break;
                            }
                            '{' => return Err(bad(format!("nested '{{' at offset {at}"))),
                            c => inner.push(c),
                        }
                    }
                    if !closed {
                        return Err(bad(format!("unclosed placeholder at offset {at}")));
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(parse_placeholder(&inner)?);
                }
                '}' => return Err(bad(format!("unmatched '}}' at offset {at}"))),
                c => literal.push(c),
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(FilePattern { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder { name, .. } => Some(name.as_str()),
            Segment::Literal(_) => None,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn expand(&self, values: &TypedValues, builtins: &Builtins) -> Result<String, ValidationError> {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder { name, width } => {
                    if name == "seq" {
                        let width = width.unwrap_or(0);
                        out.push_str(&format!("{:0width$}", builtins.seq));
                    } else if let Some(value) = values.get(name) {
                        out.push_str(&render_value(value));
                    } else {
                        match name.as_str() {
                            "study" => out.push_str(&builtins.study),
                            "site" => out.push_str(&builtins.site),
                            "date" => out.push_str(&builtins.date.format("%Y%m%d").to_string()),
                            _ => return Err(bad(format!("unresolved placeholder '{name}'"))),
                        }
                    }
                }
            }
        }
        Ok(sanitize_file_id(&out))
    }
}

fn parse_placeholder(inner: &str) -> Result<Segment, ValidationError> {
    let (name, width) = match inner.split_once(':') {
        Some((name, width)) => {
            let parsed = width
                .parse::<usize>()
                .ok()
                .filter(|w| (1..=20).contains(w))
                .ok_or_else(|| bad(format!("invalid width '{width}' in '{{{inner}}}'")))?;
            (name, Some(parsed))
        }
        None => (inner, None),
    };
    if name.is_empty() {
        return Err(bad("empty placeholder"));
    }
    if width.is_some() && name != "seq" {
        return Err(bad(format!("width is only allowed on seq, found '{{{inner}}}'")));
    }
    Ok(Segment::Placeholder {
        name: name.to_string(),
        width,
    })
}

fn render_value(value: &FieldValue) -> String {
    match value {
        FieldValue::Timestamp(t) => t.as_datetime().format("%Y%m%dT%H%M%SZ").to_string(),
        other => other.to_string(),
    }
}

/// Maps every character outside `[A-Za-z0-9._-]` to `_`.
pub fn sanitize_file_id(raw: &str) -> String {
    raw.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Parses and expands `pattern` in one step.
pub fn expand_file_id(
    pattern: &str,
    values: &TypedValues,
    builtins: &Builtins,
) -> Result<String, ValidationError> {
    FilePattern::parse(pattern)?.expand(values, builtins)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn builtins(seq: u64) -> Builtins {
        Builtins {
            study: "EMBER".into(),
            site: "LEI".into(),
            date: NaiveDate::from_ymd_opt(2026, 10, 19).unwrap(),
            seq,
        }
    }

    fn participant(p: &str) -> TypedValues {
        let mut v = TypedValues::new();
        v.insert("participant".into(), FieldValue::Text(p.into()));
        v
    }

    #[test]
    fn expands_study_participant_seq() {
        let id = expand_file_id("{study}-{participant}-{seq:3}", &participant("P001"), &builtins(7));
        assert_eq!(id.unwrap(), "EMBER-P001-007");
    }

    #[test]
    fn empty_pattern_expands_to_empty() {
        assert_eq!(expand_file_id("", &TypedValues::new(), &builtins(1)).unwrap(), "");
    }

    #[test]
    fn sanitizes_values() {
        let id = expand_file_id("{study}-{participant}-{seq:3}", &participant("P/1"), &builtins(7));
        assert_eq!(id.unwrap(), "EMBER-P_1-007");
        assert_eq!(sanitize_file_id("a b/c:d.é"), "a_b_c_d._");
    }

    #[test]
    fn seq_widens_instead_of_truncating() {
        let id = expand_file_id("{seq:3}", &TypedValues::new(), &builtins(12345)).unwrap();
        assert_eq!(id, "12345");
        let id = expand_file_id("x{seq}", &TypedValues::new(), &builtins(5)).unwrap();
        assert_eq!(id, "x5");
    }

    #[test]
    fn date_and_site_builtins() {
        let id = expand_file_id("{site}_{date}", &TypedValues::new(), &builtins(1)).unwrap();
        assert_eq!(id, "LEI_20261019");
    }

    #[test]
    fn unresolved_placeholder_is_bad_pattern() {
        let err = expand_file_id("{participant}", &TypedValues::new(), &builtins(1)).unwrap_err();
        assert_eq!(err.code, ValidationCode::BadPattern);
        assert!(err.field.is_empty());
        assert!(err.message.contains("participant"));
    }

    #[test]
    fn syntax_errors() {
        for bad_pattern in ["{", "}", "{a{b}}", "{}", "{seq:0}", "{seq:x}", "{participant:3}"] {
            let err = FilePattern::parse(bad_pattern).unwrap_err();
            assert_eq!(err.code, ValidationCode::BadPattern, "{bad_pattern}");
        }
    }

    #[test]
    fn placeholders_listed_in_order() {
        let p = FilePattern::parse("{study}-{participant}-{seq:3}.raw").unwrap();
        assert_eq!(p.placeholders().collect::<Vec<_>>(), ["study", "participant", "seq"]);
    }
}
