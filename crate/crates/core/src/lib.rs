//! Shared domain model for LabPipe.
//!
//! Everything in this crate is pure: form-template compilation, submission
//! validation, file-ID expansion, the role/permission table and the JSON
//! wire types spoken between the server, the agent and the command line.

pub mod api;
pub mod auth;
pub mod catalog;
pub mod clock;
pub mod digest;
pub mod error;
pub mod file_id;
pub mod model;
pub mod template;
pub mod transport;
pub mod validate;

pub use auth::{Permission, Role};
pub use catalog::{ConfigDocument, ConfigKind, VersionedDocument};
pub use clock::{Clock, ManualClock, SystemClock, Timestamp};
pub use error::{ValidationCode, ValidationError};
pub use file_id::{expand_file_id, sanitize_file_id, Builtins, FilePattern};
pub use model::{
    CollectionProtocol, Constraints, FieldKind, FieldSpec, FieldValue, FileArtifact, FormTemplate,
    LinkMethod, LinkageRecord, LinkageStrategy, MetadataRecord, SamplingApproach, SamplingMode,
    Site, Subscription, TemplateRef, TypedValues,
};
pub use template::compile_template;
pub use validate::validate_submission;

/// Upload chunk size in bytes. Every chunk but the last has exactly this length.
pub const CHUNK_SIZE: u64 = 4 * 1024 * 1024;

/// Number of chunks a payload of `size_bytes` is split into.
pub fn chunk_count(size_bytes: u64) -> u64 {
    size_bytes.div_ceil(CHUNK_SIZE)
}

/// Expected length of chunk `index` for a payload of `size_bytes`.
pub fn chunk_len(size_bytes: u64, index: u64) -> Option<u64> {
    let count = chunk_count(size_bytes);
    if index >= count {
        return None;
    }
    if index + 1 < count {
        Some(CHUNK_SIZE)
    } else {
        Some(size_bytes - CHUNK_SIZE * (count - 1))
    }
}
