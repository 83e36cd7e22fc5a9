//! Notification dispatch.
//!
//! Events are matched against catalog [`Subscription`]s by topic and handed
//! to in-process [`Plugin`]s on a background worker. Delivery outcomes are
//! reported through a [`DeliverySink`] and never reach the request that
//! triggered the event.

mod dispatch;
mod mail;
mod plugin;
mod topic;

pub use dispatch::{DeliveryRecord, DeliverySink, DeliveryStatus, Dispatcher};
pub use mail::{render_email, CaptureTransport, MailError, MailTransport, RenderedMessage, SmtpMailTransport};
pub use plugin::{CapturePlugin, EmailPlugin, FailingPlugin, Plugin, PluginRegistry};
pub use topic::{match_subscriptions, topic_matches};

use labpipe_core::Timestamp;
use serde::{Deserialize, Serialize};

pub use labpipe_core::Subscription;

/// Topic prefix for record ingestion events (`sample.collected.<study>`).
pub const TOPIC_SAMPLE_COLLECTED: &str = "sample.collected";
/// Topic prefix for upload commits (`file.committed.<study>`).
pub const TOPIC_FILE_COMMITTED: &str = "file.committed";

/// Payload handed to plugins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationEvent {
    pub event_id: String,
    pub topic: String,
    pub study_id: String,
    pub site_id: String,
    pub protocol_id: String,
    pub collector: String,
    pub at: Timestamp,
    pub file_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_id: Option<String>,
}
