//! `lp config load`: discover configuration documents and upsert them.

use std::path::{Path, PathBuf};

use labpipe_client::ApiClient;
use labpipe_core::transport::TransportError;
use labpipe_core::ConfigKind;
use serde::Serialize;
use serde_json::Value;

use crate::exit;

#[derive(Debug, Clone, PartialEq)]
pub struct Found {
    pub path: PathBuf,
    pub kind: ConfigKind,
    pub id: String,
    pub document: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Outcome {
    Applied { version: u64, global_version: u64 },
    Rejected { code: String, message: String, details: Vec<Value> },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(flatten)]
    pub outcome: Outcome,
}

fn kind_from_dir(name: &str) -> Option<ConfigKind> {
    let singular = match name {
        "approaches" => "approach",
        n => n.strip_suffix('s').unwrap_or(n),
    };
    singular.parse().ok()
}

/// The document kind: an explicit `kind` member, else the nearest
/// directory named after a kind (`protocols/`, `site/`, ...).
fn kind_of(path: &Path, doc: &Value) -> Result<ConfigKind, String> {
    if let Some(k) = doc.get("kind").and_then(Value::as_str) {
        return k.parse();
    }
    path.ancestors()
        .skip(1)
        .filter_map(|a| a.file_name()?.to_str())
        .find_map(kind_from_dir)
        .ok_or_else(|| "cannot tell the document kind; add a \"kind\" member or use a kind-named directory".to_string())
}

fn parse_file(path: &Path) -> Result<Found, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read: {e}"))?;
    let mut document: Value = serde_json::from_str(&text).map_err(|e| format!("invalid JSON: {e}"))?;
    let kind = kind_of(path, &document)?;
    if let Some(obj) = document.as_object_mut() {
        obj.remove("kind");
    }
    let id_field = format!("{kind}_id");
    let id = document
        .get(&id_field)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("missing \"{id_field}\""))?
        .to_string();
    Ok(Found { path: path.to_path_buf(), kind, id, document })
}

/// Finds `*.json` documents under `root` (or `root` itself), ordered so
/// that referenced documents load first.
pub fn discover(root: &Path) -> std::io::Result<(Vec<Found>, Vec<Row>)> {
    let mut files = Vec::new();
    if root.is_file() {
        files.push(root.to_path_buf());
    } else {
        for item in walkdir::WalkDir::new(root).sort_by_file_name() {
            let item = item.map_err(std::io::Error::from)?;
            if item.file_type().is_file() && item.path().extension().is_some_and(|e| e == "json") {
                files.push(item.into_path());
            }
        }
    }
    let mut found = Vec::new();
    let mut bad = Vec::new();
    for path in files {
        match parse_file(&path) {
            Ok(f) => found.push(f),
            Err(reason) => bad.push(Row {
                path: path.display().to_string(),
                kind: None,
                id: None,
                outcome: Outcome::Rejected { code: "bad_document".into(), message: reason, details: Vec::new() },
            }),
        }
    }
    let rank = |k: ConfigKind| ConfigKind::LOAD_ORDER.iter().position(|x| *x == k).unwrap_or(usize::MAX);
    found.sort_by(|a, b| rank(a.kind).cmp(&rank(b.kind)).then_with(|| a.path.cmp(&b.path)));
    Ok((found, bad))
}

/// Upserts every document; stops at the first network failure. Returns the
/// per-file rows and the exit code.
pub fn load(client: &ApiClient, root: &Path) -> std::io::Result<(Vec<Row>, i32)> {
    let (found, mut rows) = discover(root)?;
    let mut code = if rows.is_empty() { exit::OK } else { exit::REJECTED };
    let mut halted: Option<String> = None;
    for doc in found {
        let outcome = if let Some(reason) = &halted {
            Outcome::Skipped { reason: reason.clone() }
        } else {
            match client.upsert_config(doc.kind, &doc.id, &doc.document, None) {
                Ok(r) => Outcome::Applied { version: r.version, global_version: r.global_version },
                Err(e) => {
                    code = exit::worst(code, exit::for_transport(&e));
                    match e {
                        TransportError::Network(m) => {
                            halted = Some(format!("not attempted after network failure: {m}"));
                            Outcome::Rejected { code: "network".into(), message: m, details: Vec::new() }
                        }
                        TransportError::Rejected { body, .. } => {
                            Outcome::Rejected { code: body.code, message: body.message, details: body.details }
                        }
                    }
                }
            }
        };
        rows.push(Row {
            path: doc.path.display().to_string(),
            kind: Some(doc.kind.to_string()),
            id: Some(doc.id),
            outcome,
        });
    }
    Ok((rows, code))
}
