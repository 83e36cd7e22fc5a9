//! Named points where tests can simulate the agent process dying.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use crate::journal::EntryKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashPoint {
    /// Key minted, entry not yet journaled.
    PreJournal,
    /// Entry marked in flight, nothing sent.
    PostJournalPreSend,
    /// Some chunks of an upload sent, not all.
    MidChunk,
    /// Server applied the request; reply not yet seen.
    PostSendPreAck,
    /// Reply understood as an ack; journal not yet updated.
    PostAckPreMark,
    /// Ack journaled.
    PostMark,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 6] = [
        CrashPoint::PreJournal,
        CrashPoint::PostJournalPreSend,
        CrashPoint::MidChunk,
        CrashPoint::PostSendPreAck,
        CrashPoint::PostAckPreMark,
        CrashPoint::PostMark,
    ];
}

/// Returns true to crash at this point.
pub type CrashHook = Arc<dyn Fn(CrashPoint, EntryKind) -> bool + Send + Sync>;

/// Fires once, at the first visit of `point` for an entry of `kind`.
pub fn crash_once(point: CrashPoint, kind: EntryKind) -> CrashHook {
    let fired = std::sync::atomic::AtomicBool::new(false);
    Arc::new(move |p, k| {
        p == point && k == kind && !fired.swap(true, std::sync::atomic::Ordering::SeqCst)
    })
}
