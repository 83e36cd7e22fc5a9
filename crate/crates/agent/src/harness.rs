//! Fault-injecting [`Transport`] wrapper for offline and lossy-network
//! tests: requests can be dropped before reaching the server, and replies
//! can be dropped after the server applied the request.

use std::sync::Mutex;

use labpipe_core::api::{
    BeginUploadRequest, BeginUploadResponse, ChunkAck, CommitResponse, ConfigDelta,
    IngestResponse,
};
use labpipe_core::transport::{Transport, TransportError, TransportResult};
use labpipe_core::{ConfigKind, MetadataRecord, VersionedDocument};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlakyStats {
    pub delivered: u64,
    pub dropped_requests: u64,
    pub dropped_replies: u64,
}

struct Faults {
    rng: ChaCha8Rng,
    request_drop: f64,
    reply_drop: f64,
    stats: FlakyStats,
}

pub struct FlakyTransport<T> {
    inner: T,
    faults: Mutex<Faults>,
}

impl<T: Transport> FlakyTransport<T> {
    pub fn new(inner: T, seed: u64) -> Self {
        Self {
            inner,
            faults: Mutex::new(Faults {
                rng: ChaCha8Rng::seed_from_u64(seed),
                request_drop: 0.0,
                reply_drop: 0.0,
                stats: FlakyStats::default(),
            }),
        }
    }

    /// Drops every request (`false`) or none (`true`).
    pub fn set_online(&self, online: bool) {
        self.set_drop_rates(if online { 0.0 } else { 1.0 }, 0.0);
    }

    pub fn set_drop_rates(&self, request: f64, reply: f64) {
        let mut f = self.faults.lock().unwrap();
        f.request_drop = request;
        f.reply_drop = reply;
    }

    pub fn stats(&self) -> FlakyStats {
        self.faults.lock().unwrap().stats
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }

    fn call<R>(&self, op: impl FnOnce(&T) -> TransportResult<R>) -> TransportResult<R> {
        {
            let mut f = self.faults.lock().unwrap();
            let p = f.request_drop;
            if p > 0.0 && f.rng.gen_bool(p.min(1.0)) {
                f.stats.dropped_requests += 1;
                return Err(TransportError::Network("request dropped".into()));
            }
        }
        let result = op(&self.inner);
        let mut f = self.faults.lock().unwrap();
        let p = f.reply_drop;
        if p > 0.0 && f.rng.gen_bool(p.min(1.0)) {
            f.stats.dropped_replies += 1;
            return Err(TransportError::Network("reply dropped".into()));
        }
        f.stats.delivered += 1;
        result
    }
}

impl<T: Transport> Transport for FlakyTransport<T> {
    fn list_configs(&self, since: u64) -> TransportResult<ConfigDelta> {
        self.call(|t| t.list_configs(since))
    }
    fn get_config(&self, kind: ConfigKind, id: &str, version: Option<u64>) -> TransportResult<VersionedDocument> {
        self.call(|t| t.get_config(kind, id, version))
    }
    fn ingest_record(&self, key: &str, record: &MetadataRecord) -> TransportResult<IngestResponse> {
        self.call(|t| t.ingest_record(key, record))
    }
    fn begin_upload(&self, request: &BeginUploadRequest) -> TransportResult<BeginUploadResponse> {
        self.call(|t| t.begin_upload(request))
    }
    fn upload_chunk(&self, upload_id: &str, index: u64, bytes: &[u8]) -> TransportResult<ChunkAck> {
        self.call(|t| t.upload_chunk(upload_id, index, bytes))
    }
    fn commit_upload(&self, upload_id: &str) -> TransportResult<CommitResponse> {
        self.call(|t| t.commit_upload(upload_id))
    }
}

/// A transport with no server behind it.
pub struct Unreachable;

impl Transport for Unreachable {
    fn list_configs(&self, _: u64) -> TransportResult<ConfigDelta> {
        Err(TransportError::Network("unreachable".into()))
    }
    fn get_config(&self, _: ConfigKind, _: &str, _: Option<u64>) -> TransportResult<VersionedDocument> {
        Err(TransportError::Network("unreachable".into()))
    }
    fn ingest_record(&self, _: &str, _: &MetadataRecord) -> TransportResult<IngestResponse> {
        Err(TransportError::Network("unreachable".into()))
    }
    fn begin_upload(&self, _: &BeginUploadRequest) -> TransportResult<BeginUploadResponse> {
        Err(TransportError::Network("unreachable".into()))
    }
    fn upload_chunk(&self, _: &str, _: u64, _: &[u8]) -> TransportResult<ChunkAck> {
        Err(TransportError::Network("unreachable".into()))
    }
    fn commit_upload(&self, _: &str) -> TransportResult<CommitResponse> {
        Err(TransportError::Network("unreachable".into()))
    }
}
