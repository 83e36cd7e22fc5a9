//! Local copy of the server's configuration catalog.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use labpipe_core::{
    CollectionProtocol, ConfigDocument, ConfigKind, FormTemplate, VersionedDocument,
};
use serde::{Deserialize, Serialize};

use crate::fsutil::write_atomic;

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
struct CacheFile {
    global_version: u64,
    documents: Vec<VersionedDocument>,
    /// Every template version fetched, including ones no longer latest.
    templates: Vec<FormTemplate>,
}

#[derive(Debug)]
pub struct ConfigCache {
    path: PathBuf,
    global_version: u64,
    latest: BTreeMap<(ConfigKind, String), VersionedDocument>,
    templates: BTreeMap<(String, u64), FormTemplate>,
}

impl ConfigCache {
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let file: CacheFile = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("config cache: {e}")))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => CacheFile::default(),
            Err(e) => return Err(e),
        };
        Ok(Self {
            path,
            global_version: file.global_version,
            latest: file.documents.into_iter().map(|d| ((d.kind, d.id.clone()), d)).collect(),
            templates: file
                .templates
                .into_iter()
                .map(|t| ((t.template_id.clone(), t.version), t))
                .collect(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn global_version(&self) -> u64 {
        self.global_version
    }

    pub fn documents(&self) -> impl Iterator<Item = &VersionedDocument> {
        self.latest.values()
    }

    pub fn document(&self, kind: ConfigKind, id: &str) -> Option<&VersionedDocument> {
        self.latest.get(&(kind, id.to_string()))
    }

    pub fn protocols(&self) -> Vec<CollectionProtocol> {
        self.latest
            .values()
            .filter(|d| d.kind == ConfigKind::Protocol)
            .filter_map(|d| match d.parse() {
                Ok(ConfigDocument::Protocol(p)) => Some(p),
                _ => None,
            })
            .collect()
    }

    pub fn protocol(&self, id: &str) -> Option<CollectionProtocol> {
        match self.document(ConfigKind::Protocol, id)?.parse() {
            Ok(ConfigDocument::Protocol(p)) => Some(p),
            _ => None,
        }
    }

    pub fn template(&self, id: &str, version: u64) -> Option<&FormTemplate> {
        self.templates.get(&(id.to_string(), version))
    }

    pub fn latest_template(&self, id: &str) -> Option<&FormTemplate> {
        self.templates.range((id.to_string(), 0)..=(id.to_string(), u64::MAX)).next_back().map(|(_, t)| t)
    }

    /// Template references of cached protocols that are not cached.
    pub fn missing_templates(&self) -> Vec<(String, u64)> {
        let mut missing: Vec<_> = self
            .protocols()
            .into_iter()
            .map(|p| (p.template.template_id, p.template.version))
            .filter(|k| !self.templates.contains_key(k))
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }

    /// Applies a delta (or a full replacement) and persists the result.
    pub fn apply(&mut self, global_version: u64, documents: Vec<VersionedDocument>, replace: bool) -> std::io::Result<usize> {
        if replace {
            self.latest.clear();
        }
        let applied = documents.len();
        for doc in documents {
            self.insert(doc);
        }
        self.global_version = global_version;
        self.save()?;
        Ok(applied)
    }

    /// Adds a document without changing the global version.
    pub fn insert(&mut self, doc: VersionedDocument) {
        if let Ok(ConfigDocument::Template(t)) = doc.parse() {
            self.templates.insert((t.template_id.clone(), t.version), t);
        }
        let key = (doc.kind, doc.id.clone());
        let newer = self.latest.get(&key).is_none_or(|d| d.version <= doc.version);
        if newer {
            self.latest.insert(key, doc);
        }
    }

    pub fn insert_template(&mut self, template: FormTemplate) {
        self.templates.insert((template.template_id.clone(), template.version), template);
    }

    pub fn save(&self) -> std::io::Result<()> {
        let file = CacheFile {
            global_version: self.global_version,
            documents: self.latest.values().cloned().collect(),
            templates: self.templates.values().cloned().collect(),
        };
        write_atomic(&self.path, &serde_json::to_vec_pretty(&file).expect("cache serializes"))
    }
}
