//! LabPipe central service.
//!
//! [`Server`] holds the whole service state and exposes one method per API
//! operation; [`http`] maps those methods onto the `/api/v1` routes.

pub mod audit;
pub mod blobs;
mod catalog;
pub mod error;
pub mod http;
pub mod local;
mod principals;
mod records;
pub mod store;
mod uploads;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use labpipe_core::api::AuditOutcome;
use labpipe_core::{Clock, Permission, SystemClock};
use labpipe_notify::{
    CapturePlugin, CaptureTransport, DeliveryRecord, DeliverySink, DeliveryStatus, Dispatcher,
    EmailPlugin, NotificationEvent, PluginRegistry, SmtpMailTransport,
};

pub use catalog::CatalogIndex;
pub use error::{ApiError, ApiResult};
pub use principals::Principal;
pub use records::record_id_for_key;
pub use uploads::{UploadSession, UploadState, UPLOAD_TTL};

use audit::AuditLog;
use blobs::BlobStore;
use store::{DocumentStore, FsStore};

pub const ENV_DATA_DIR: &str = "LP_DATA_DIR";
pub const ENV_BIND_ADDR: &str = "LP_BIND_ADDR";
pub const ENV_SMTP_URL: &str = "LP_SMTP_URL";
pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";

/// Principal id recorded for events not caused by an API caller.
pub const SYSTEM_PRINCIPAL: &str = "system";
pub const ANONYMOUS_PRINCIPAL: &str = "anonymous";

#[derive(Debug, thiserror::Error)]
pub enum OpenError {
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Audit(#[from] audit::AuditError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub struct ServerOptions {
    pub clock: Arc<dyn Clock>,
    pub plugins: PluginRegistry,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            clock: Arc::new(SystemClock),
            plugins: PluginRegistry::new(),
        }
    }
}

impl ServerOptions {
    /// Registers the `email` plugin (SMTP when `smtp_url` is set, otherwise
    /// an in-memory capture) and the `capture` plugin.
    pub fn with_default_plugins(mut self, smtp_url: Option<&str>) -> Result<Self, labpipe_notify::MailError> {
        let capture = CaptureTransport::new();
        let email = match smtp_url {
            Some(url) => EmailPlugin::new(Arc::new(SmtpMailTransport::from_url(url)?), "labpipe@localhost"),
            None => EmailPlugin::new(Arc::new(capture.clone()), "labpipe@localhost"),
        };
        self.plugins.register(Arc::new(email));
        self.plugins.register(Arc::new(CapturePlugin::new(capture)));
        Ok(self)
    }
}

pub struct Server {
    data_dir: PathBuf,
    store: Arc<dyn DocumentStore>,
    audit: Arc<AuditLog>,
    blobs: BlobStore,
    clock: Arc<dyn Clock>,
    dispatcher: Dispatcher,
    catalog: Mutex<CatalogIndex>,
    upload_lock: Mutex<()>,
}

struct StoreSink {
    store: Arc<dyn DocumentStore>,
    audit: Arc<AuditLog>,
}

impl DeliverySink for StoreSink {
    fn record(&self, delivery: &DeliveryRecord, _: &NotificationEvent) {
        let id = format!("{}/{}", delivery.event_id, delivery.subscription_id);
        let doc = serde_json::to_value(delivery).expect("delivery records serialize");
        if let Err(e) = self.store.put("deliveries", &id, &doc) {
            tracing::error!(error = %e, "could not persist delivery record");
        }
        let outcome = match delivery.status {
            DeliveryStatus::Delivered => AuditOutcome::Allowed,
            DeliveryStatus::Failed => AuditOutcome::Error,
        };
        let resource = format!("subscription/{}", delivery.subscription_id);
        if let Err(e) = self.audit.append(delivery.attempted_at, SYSTEM_PRINCIPAL, "notify.deliver", &resource, outcome) {
            tracing::error!(error = %e, "could not audit delivery");
        }
    }
}

impl Server {
    pub fn open(data_dir: impl AsRef<Path>, options: ServerOptions) -> Result<Self, OpenError> {
        let store = Arc::new(FsStore::open(data_dir.as_ref().join("docs"))?);
        Self::open_with_store(data_dir, store, options)
    }

    /// Opens with a caller-supplied document store; blobs and the audit log
    /// still live under `data_dir`.
    pub fn open_with_store(
        data_dir: impl AsRef<Path>,
        store: Arc<dyn DocumentStore>,
        options: ServerOptions,
    ) -> Result<Self, OpenError> {
        let data_dir = data_dir.as_ref().to_path_buf();
        let audit = Arc::new(AuditLog::open(data_dir.join("audit.log"))?);
        let blobs = BlobStore::open(&data_dir)?;
        let catalog = CatalogIndex::load(store.as_ref())?;
        let sink = Arc::new(StoreSink {
            store: store.clone(),
            audit: audit.clone(),
        });
        let dispatcher = Dispatcher::new(options.plugins, sink, options.clock.clone());
        Ok(Self {
            data_dir,
            store,
            audit,
            blobs,
            clock: options.clock,
            dispatcher,
            catalog: Mutex::new(catalog),
            upload_lock: Mutex::new(()),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    pub fn store(&self) -> &dyn DocumentStore {
        self.store.as_ref()
    }

    pub fn audit_log(&self) -> &AuditLog {
        &self.audit
    }

    pub(crate) fn audit(&self, principal_id: &str, action: &str, resource: &str, outcome: AuditOutcome) -> ApiResult<u64> {
        Ok(self.audit.append(self.clock.now(), principal_id, action, resource, outcome)?)
    }

    /// Checks `permission`, auditing a denial.
    pub fn require(&self, principal: &Principal, permission: Permission, action: &str, resource: &str) -> ApiResult<()> {
        if principal.can(permission) {
            return Ok(());
        }
        self.audit(&principal.principal_id, action, resource, AuditOutcome::Denied)?;
        Err(ApiError::forbidden(format!(
            "{} lacks {permission} for {action}",
            principal.principal_id
        )))
    }

    /// Runs `op` and audits its outcome as allowed or error.
    pub(crate) fn audited<T>(
        &self,
        principal: &Principal,
        action: &str,
        resource: &str,
        op: impl FnOnce() -> ApiResult<T>,
    ) -> ApiResult<T> {
        let result = op();
        let outcome = if result.is_ok() {
            AuditOutcome::Allowed
        } else {
            AuditOutcome::Error
        };
        self.audit(&principal.principal_id, action, resource, outcome)?;
        result
    }

    /// Queues a notification for every matching subscription; returns the
    /// number queued. Delivery happens off the caller's path.
    pub fn publish_event(&self, event: NotificationEvent) -> usize {
        let subscriptions = self.catalog.lock().unwrap().subscriptions();
        self.dispatcher.publish(event, &subscriptions)
    }

    /// Waits for queued notifications to be attempted.
    pub fn flush_notifications(&self) {
        self.dispatcher.flush();
    }

    pub fn deliveries(&self) -> ApiResult<Vec<DeliveryRecord>> {
        Ok(self
            .store
            .list("deliveries")?
            .into_iter()
            .filter_map(|(_, v)| serde_json::from_value(v).ok())
            .collect())
    }

    pub fn read_audit(&self, principal: &Principal, since_seq: u64) -> ApiResult<Vec<labpipe_core::api::AuditEvent>> {
        self.require(principal, Permission::AuditRead, "audit.read", "audit")?;
        // The returned page includes this read.
        self.audit(&principal.principal_id, "audit.read", "audit", AuditOutcome::Allowed)?;
        Ok(self.audit.read(since_seq))
    }
}
