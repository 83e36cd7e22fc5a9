//! Versioned configuration catalog.
//!
//! Every accepted upsert writes one immutable document version under
//! `catalog/<kind>/<id>/<version>`. The in-memory index is rebuilt from
//! those documents at startup, so the global version is always the maximum
//! stamp actually persisted.

use std::collections::BTreeMap;

use labpipe_core::api::{codes, AuditOutcome, ConfigDelta, UpsertResponse};
use labpipe_core::{
    CollectionProtocol, ConfigDocument, ConfigKind, FormTemplate, Permission, Subscription,
    VersionedDocument,
};
use serde_json::Value;

use crate::store::{DocumentStore, StoreResult};
use crate::{ApiError, ApiResult, Principal, Server};

const COLLECTION: &str = "catalog";

fn doc_key(kind: ConfigKind, id: &str, version: u64) -> String {
    format!("{kind}/{id}/{version:012}")
}

#[derive(Debug, Default, Clone)]
pub struct CatalogIndex {
    docs: BTreeMap<(ConfigKind, String), Vec<VersionedDocument>>,
    global_version: u64,
}

impl CatalogIndex {
    pub fn load(store: &dyn DocumentStore) -> StoreResult<Self> {
        let mut index = CatalogIndex::default();
        for (key, value) in store.list(COLLECTION)? {
            match serde_json::from_value::<VersionedDocument>(value) {
                Ok(doc) => index.insert(doc),
                Err(e) => tracing::error!(%key, error = %e, "skipping unreadable catalog document"),
            }
        }
        for versions in index.docs.values_mut() {
            versions.sort_by_key(|d| d.version);
        }
        Ok(index)
    }

    fn insert(&mut self, doc: VersionedDocument) {
        self.global_version = self.global_version.max(doc.global_version);
        self.docs.entry((doc.kind, doc.id.clone())).or_default().push(doc);
    }

    pub fn global_version(&self) -> u64 {
        self.global_version
    }

    pub fn latest(&self, kind: ConfigKind, id: &str) -> Option<&VersionedDocument> {
        self.docs.get(&(kind, id.to_string())).and_then(|v| v.last())
    }

    pub fn version(&self, kind: ConfigKind, id: &str, version: u64) -> Option<&VersionedDocument> {
        self.docs
            .get(&(kind, id.to_string()))
            .and_then(|v| v.iter().find(|d| d.version == version))
    }

    /// Latest version of every document last written after `since`.
    pub fn changed_since(&self, since: u64) -> Vec<VersionedDocument> {
        let mut out: Vec<VersionedDocument> = self
            .docs
            .values()
            .filter_map(|v| v.last())
            .filter(|d| d.global_version > since)
            .cloned()
            .collect();
        out.sort_by_key(|d| d.global_version);
        out
    }

    fn parsed<T>(&self, kind: ConfigKind, pick: impl Fn(ConfigDocument) -> Option<T>) -> Vec<T> {
        self.docs
            .iter()
            .filter(|((k, _), _)| *k == kind)
            .filter_map(|(_, v)| v.last())
            .filter_map(|d| d.parse().ok())
            .filter_map(pick)
            .collect()
    }

    pub fn subscriptions(&self) -> Vec<Subscription> {
        self.parsed(ConfigKind::Subscription, |d| match d {
            ConfigDocument::Subscription(s) => Some(s),
            _ => None,
        })
    }

    pub fn protocol(&self, id: &str) -> Option<CollectionProtocol> {
        match self.latest(ConfigKind::Protocol, id)?.parse().ok()? {
            ConfigDocument::Protocol(p) => Some(p),
            _ => None,
        }
    }

    pub fn template(&self, id: &str, version: u64) -> Option<FormTemplate> {
        match self.version(ConfigKind::Template, id, version)?.parse().ok()? {
            ConfigDocument::Template(t) => Some(t),
            _ => None,
        }
    }
}

impl Server {
    /// Validates and stores a new version of a configuration document.
    ///
    /// Every accepted call bumps the document version, even for identical
    /// content. `expected_version`, when given, must equal the current
    /// version (0 for a document that does not exist yet).
    pub fn upsert_config(
        &self,
        caller: &Principal,
        kind: ConfigKind,
        id: &str,
        raw: &Value,
        expected_version: Option<u64>,
    ) -> ApiResult<UpsertResponse> {
        let resource = format!("config/{kind}/{id}");
        self.require(caller, Permission::ConfigWrite, "config.upsert", &resource)?;
        self.audited(caller, "config.upsert", &resource, || {
            let mut doc = ConfigDocument::parse(kind, raw).map_err(ApiError::validation)?;
            if doc.id() != id {
                return Err(ApiError::bad_request(format!(
                    "document id '{}' does not match path id '{id}'",
                    doc.id()
                )));
            }
            let mut catalog = self.catalog.lock().unwrap();
            self.check_references(&catalog, &doc)?;
            let current = catalog.latest(kind, id).map_or(0, |d| d.version);
            if let Some(expected) = expected_version {
                if expected != current {
                    return Err(ApiError::new(
                        409,
                        codes::VERSION_CONFLICT,
                        format!("{kind}/{id} is at version {current}, not {expected}"),
                    ));
                }
            }
            let version = current + 1;
            let global_version = catalog.global_version() + 1;
            doc.set_template_version(version);
            let stored = VersionedDocument {
                kind,
                id: id.to_string(),
                version,
                global_version,
                document: doc.to_json(),
            };
            let value = serde_json::to_value(&stored).expect("catalog documents serialize");
            if !self.store.create(COLLECTION, &doc_key(kind, id, version), &value)? {
                return Err(ApiError::new(409, codes::VERSION_CONFLICT, format!("{kind}/{id} version {version} already written")));
            }
            catalog.insert(stored);
            Ok(UpsertResponse {
                kind,
                id: id.to_string(),
                version,
                global_version,
            })
        })
    }

    fn check_references(&self, catalog: &CatalogIndex, doc: &ConfigDocument) -> ApiResult<()> {
        let mut problems = Vec::new();
        match doc {
            ConfigDocument::Protocol(p) => {
                if catalog.version(ConfigKind::Template, &p.template.template_id, p.template.version).is_none() {
                    problems.push(format!(
                        "template {} version {} does not exist",
                        p.template.template_id, p.template.version
                    ));
                }
                if catalog.latest(ConfigKind::Site, &p.site_id).is_none() {
                    problems.push(format!("site '{}' does not exist", p.site_id));
                }
                if let Some(a) = &p.approach_id {
                    if catalog.latest(ConfigKind::Approach, a).is_none() {
                        problems.push(format!("sampling approach '{a}' does not exist"));
                    }
                }
            }
            ConfigDocument::Subscription(s) => {
                if !self.dispatcher.registry().contains(&s.plugin) {
                    problems.push(format!(
                        "plugin '{}' is not registered (available: {})",
                        s.plugin,
                        self.dispatcher.registry().names().join(", ")
                    ));
                }
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ApiError::validation(
                problems
                    .into_iter()
                    .map(|m| labpipe_core::ValidationError::new("", labpipe_core::ValidationCode::ConstraintViolation, m))
                    .collect(),
            ))
        }
    }

    /// Documents changed after `since`, plus the current global version.
    pub fn list_configs(&self, caller: &Principal, since: u64) -> ApiResult<ConfigDelta> {
        self.require(caller, Permission::ConfigRead, "config.list", "configs")?;
        let catalog = self.catalog.lock().unwrap();
        let delta = ConfigDelta {
            global_version: catalog.global_version(),
            documents: catalog.changed_since(since),
        };
        drop(catalog);
        self.audit(&caller.principal_id, "config.list", &format!("configs?since={since}"), AuditOutcome::Allowed)?;
        Ok(delta)
    }

    /// One document, latest or at a specific version.
    pub fn get_config(&self, caller: &Principal, kind: ConfigKind, id: &str, version: Option<u64>) -> ApiResult<VersionedDocument> {
        let resource = format!("config/{kind}/{id}");
        self.require(caller, Permission::ConfigRead, "config.get", &resource)?;
        self.audited(caller, "config.get", &resource, || {
            let catalog = self.catalog.lock().unwrap();
            let found = match version {
                Some(v) => catalog.version(kind, id, v),
                None => catalog.latest(kind, id),
            };
            found
                .cloned()
                .ok_or_else(|| ApiError::not_found(format!("no {kind} '{id}' at the requested version")))
        })
    }

    pub fn catalog_snapshot(&self) -> CatalogIndex {
        self.catalog.lock().unwrap().clone()
    }
}
