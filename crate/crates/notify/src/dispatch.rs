use std::panic::{self, AssertUnwindSafe};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use labpipe_core::{Clock, Subscription, Timestamp};
use serde::{Deserialize, Serialize};

use crate::plugin::PluginRegistry;
use crate::topic::topic_matches;
use crate::NotificationEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryStatus {
    Delivered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub event_id: String,
    pub subscription_id: String,
    pub plugin: String,
    pub status: DeliveryStatus,
    pub attempted_at: Timestamp,
    pub detail: String,
}

/// Receives one record per delivery attempt, in attempt order.
pub trait DeliverySink: Send + Sync {
    fn record(&self, delivery: &DeliveryRecord, event: &NotificationEvent);
}

struct Job {
    event: NotificationEvent,
    subscription: Subscription,
}

#[derive(Default)]
struct Pending {
    count: Mutex<usize>,
    idle: Condvar,
}

/// Matches events to subscriptions and delivers them on a worker thread.
///
/// Each (event, subscription) pair is attempted exactly once; there are no
/// retries.
pub struct Dispatcher {
    registry: Arc<PluginRegistry>,
    clock: Arc<dyn Clock>,
    sender: Mutex<Option<Sender<Job>>>,
    pending: Arc<Pending>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl Dispatcher {
    pub fn new(registry: PluginRegistry, sink: Arc<dyn DeliverySink>, clock: Arc<dyn Clock>) -> Self {
        let registry = Arc::new(registry);
        let pending = Arc::new(Pending::default());
        let (sender, receiver) = mpsc::channel::<Job>();
        let worker = {
            let registry = registry.clone();
            let clock = clock.clone();
            let pending = pending.clone();
            std::thread::Builder::new()
                .name("lp-notify".into())
                .spawn(move || {
                    for job in receiver {
                        let record = deliver(&registry, clock.as_ref(), &job.event, &job.subscription);
                        sink.record(&record, &job.event);
                        let mut count = pending.count.lock().unwrap();
                        *count -= 1;
                        if *count == 0 {
                            pending.idle.notify_all();
                        }
                    }
                })
                .expect("spawn notification worker")
        };
        Self {
            registry,
            clock,
            sender: Mutex::new(Some(sender)),
            pending,
            worker: Mutex::new(Some(worker)),
        }
    }

    pub fn registry(&self) -> &PluginRegistry {
        &self.registry
    }

    /// Queues `event` for every matching subscription and returns how many
    /// deliveries were queued. Never blocks on delivery.
    pub fn publish(&self, event: NotificationEvent, subscriptions: &[Subscription]) -> usize {
        let matched: Vec<&Subscription> = subscriptions
            .iter()
            .filter(|s| topic_matches(&s.topic, &event.topic))
            .collect();
        let sender = self.sender.lock().unwrap();
        let Some(sender) = sender.as_ref() else {
            return 0;
        };
        let mut queued = 0;
        for subscription in matched {
            *self.pending.count.lock().unwrap() += 1;
            let job = Job {
                event: event.clone(),
                subscription: subscription.clone(),
            };
            if sender.send(job).is_ok() {
                queued += 1;
            } else {
                *self.pending.count.lock().unwrap() -= 1;
            }
        }
        queued
    }

    /// Delivers synchronously, bypassing the worker.
    pub fn deliver_now(&self, event: &NotificationEvent, subscription: &Subscription) -> DeliveryRecord {
        deliver(&self.registry, self.clock.as_ref(), event, subscription)
    }

    /// Blocks until every queued delivery has been attempted.
    pub fn flush(&self) {
        let mut count = self.pending.count.lock().unwrap();
        while *count > 0 {
            count = self.pending.idle.wait(count).unwrap();
        }
    }

    /// Drains the queue and stops the worker.
    pub fn shutdown(&self) {
        self.sender.lock().unwrap().take();
        if let Some(worker) = self.worker.lock().unwrap().take() {
            let _ = worker.join();
        }
    }
}

impl Drop for Dispatcher {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn deliver(
    registry: &PluginRegistry,
    clock: &dyn Clock,
    event: &NotificationEvent,
    subscription: &Subscription,
) -> DeliveryRecord {
    let attempted_at = clock.now();
    let outcome = match registry.get(&subscription.plugin) {
        None => Err(format!("plugin '{}' is not registered", subscription.plugin)),
        Some(plugin) => panic::catch_unwind(AssertUnwindSafe(|| plugin.deliver(event, subscription)))
            .unwrap_or_else(|payload| {
                let reason = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "unknown panic".into());
                Err(format!("plugin panicked: {reason}"))
            }),
    };
    let (status, detail) = match outcome {
        Ok(detail) => (DeliveryStatus::Delivered, detail),
        Err(detail) => {
            tracing::warn!(subscription = %subscription.subscription_id, %detail, "notification delivery failed");
            (DeliveryStatus::Failed, detail)
        }
    };
    DeliveryRecord {
        event_id: event.event_id.clone(),
        subscription_id: subscription.subscription_id.clone(),
        plugin: subscription.plugin.clone(),
        status,
        attempted_at,
        detail,
    }
}
