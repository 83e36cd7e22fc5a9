//! LabPipe collection agent.
//!
//! The agent caches the server's configuration catalog, runs collection
//! sessions against it, watches each session's directory for instrument
//! files, links them to submitted records and uploads both through a
//! durable journal so that work done offline reaches the server exactly
//! once when connectivity returns.

mod agent;
pub mod backoff;
pub mod cache;
pub mod config;
pub mod crash;
mod fsutil;
pub mod harness;
pub mod journal;
pub mod local_api;
pub mod runtime;
pub mod scan;
pub mod session;

pub use agent::{
    matches_expected, Agent, AgentError, AgentOptions, AgentResult, Connectivity, LinkageStatus,
    ProtocolView, RecordLinkState, RecordStatus, RefreshReport, ScanOutcome, SessionStatus,
    Submission, SyncReport,
};
pub use config::AgentConfig;
pub use crash::{CrashHook, CrashPoint};
pub use journal::{EntryKind, EntryState, JournalEntry};
