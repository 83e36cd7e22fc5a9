use std::collections::BTreeMap;
use std::sync::Arc;

use labpipe_core::Subscription;

use crate::mail::{render_email, CaptureTransport, MailTransport, RenderedMessage};
use crate::NotificationEvent;

/// A delivery mechanism. `Ok` carries a short detail string for the
/// delivery record; `Err` marks the delivery failed.
pub trait Plugin: Send + Sync {
    fn name(&self) -> &str;
    fn deliver(&self, event: &NotificationEvent, subscription: &Subscription) -> Result<String, String>;
}

pub struct EmailPlugin {
    transport: Arc<dyn MailTransport>,
    from: String,
}

impl EmailPlugin {
    pub fn new(transport: Arc<dyn MailTransport>, from: impl Into<String>) -> Self {
        Self {
            transport,
            from: from.into(),
        }
    }
}

impl Plugin for EmailPlugin {
    fn name(&self) -> &str {
        "email"
    }

    fn deliver(&self, event: &NotificationEvent, subscription: &Subscription) -> Result<String, String> {
        if subscription.recipients.is_empty() {
            return Err("subscription has no recipients".into());
        }
        let (subject, body) = render_email(event);
        let message = RenderedMessage {
            from: self.from.clone(),
            to: subscription.recipients.clone(),
            subject,
            body,
        };
        self.transport.send(&message).map_err(|e| e.to_string())?;
        Ok(format!("sent to {}", subscription.recipients.join(", ")))
    }
}

/// Appends the rendered message to an inspectable list.
pub struct CapturePlugin {
    sink: CaptureTransport,
}

impl CapturePlugin {
    pub fn new(sink: CaptureTransport) -> Self {
        Self { sink }
    }
}

impl Plugin for CapturePlugin {
    fn name(&self) -> &str {
        "capture"
    }

    fn deliver(&self, event: &NotificationEvent, subscription: &Subscription) -> Result<String, String> {
        let (subject, body) = render_email(event);
        self.sink.push(RenderedMessage {
            from: "labpipe@localhost".into(),
            to: subscription.recipients.clone(),
            subject,
            body,
        });
        Ok("captured".into())
    }
}

/// Always fails, or panics when built with [`FailingPlugin::panicking`].
/// Used for fault injection.
pub struct FailingPlugin {
    name: String,
    panic: bool,
}

impl FailingPlugin {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            panic: false,
        }
    }

    pub fn panicking(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            panic: true,
        }
    }
}

impl Plugin for FailingPlugin {
    fn name(&self) -> &str {
        &self.name
    }

    fn deliver(&self, _: &NotificationEvent, _: &Subscription) -> Result<String, String> {
        if self.panic {
            panic!("plugin {} exploded", self.name);
        }
        Err(format!("plugin {} always fails", self.name))
    }
}

#[derive(Default, Clone)]
pub struct PluginRegistry {
    plugins: BTreeMap<String, Arc<dyn Plugin>>,
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `plugin` under its name, replacing any previous holder.
    pub fn register(&mut self, plugin: Arc<dyn Plugin>) {
        self.plugins.insert(plugin.name().to_string(), plugin);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Plugin>> {
        self.plugins.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.plugins.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.plugins.keys().cloned().collect()
    }
}
