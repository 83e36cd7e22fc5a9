//! End-to-end agent scenarios shared with the acceptance suite.

use std::sync::Arc;
use std::time::Duration;

use labpipe_agent::crash::crash_once;
use labpipe_agent::harness::FlakyTransport;
use labpipe_agent::{AgentError, AgentResult, CrashPoint, EntryKind};
use labpipe_core::digest::sha256_hex;
use labpipe_core::CHUNK_SIZE;
use rand::{Rng, RngCore, SeedableRng};

use super::{drain, form, settle, write_file, Env};

const MIB: usize = 1024 * 1024;

/// Kills the agent at `point` while handling an entry of `kind`, restarts
/// it and syncs. Ok when the server holds exactly one record, one artifact
/// and one linkage.
pub fn crash_case(point: CrashPoint, kind: EntryKind) -> Result<(), String> {
    let env = Env::new();
    env.install("P", "change_detection");
    let size = if point == CrashPoint::MidChunk { 2 * CHUNK_SIZE as usize + 5 } else { 1000 };
    let bytes = vec![0x5a; size];
    let path = env.watch("P").join("sample.raw");

    let fired = {
        let agent = env.agent(Arc::new(env.local()), Some(crash_once(point, kind)));
        agent.refresh_configs().map_err(|e| e.to_string())?;
        let sid = agent.start_session("P").map_err(|e| e.to_string())?.session_id;
        let run = || -> AgentResult<()> {
            agent.submit_form(&sid, &form("P001"))?;
            write_file(&path, &bytes, 100);
            agent.scan_session(&sid)?;
            agent.scan_session(&sid)?;
            for _ in 0..5 {
                agent.sync_once()?;
            }
            Ok(())
        };
        match run() {
            Err(AgentError::Crashed(p)) => p == point,
            Err(e) => return Err(format!("unexpected error before crash: {e}")),
            Ok(()) => false,
        }
    };
    if !fired {
        return Err(format!("{point:?}/{kind:?} was never reached"));
    }

    let agent = env.agent(Arc::new(env.local()), None);
    let sessions = agent.sessions();
    let sid = sessions.first().ok_or("session lost across restart")?.session_id.clone();
    if agent.session(&sid).unwrap().records.is_empty() {
        // The submit never returned; the operator submits again.
        agent.submit_form(&sid, &form("P001")).map_err(|e| e.to_string())?;
    }
    if !path.exists() {
        write_file(&path, &bytes, 100);
    }
    settle(&agent, &sid);
    drain(&agent, &env.clock, Duration::from_secs(300));
    let state = env.server_state();
    if state != (1, 1, 1) || agent.journal_depth() != 0 {
        return Err(format!(
            "server (records, artifacts, linkages) = {state:?}, journal depth {}",
            agent.journal_depth()
        ));
    }
    Ok(())
}

/// Every meaningful (point, kind) pair.
pub fn crash_matrix() -> Vec<(CrashPoint, EntryKind)> {
    let mut cases = Vec::new();
    for point in CrashPoint::ALL {
        for kind in [EntryKind::Record, EntryKind::FileChunkSet] {
            if point == CrashPoint::MidChunk && kind == EntryKind::Record {
                continue;
            }
            cases.push((point, kind));
        }
    }
    cases
}

/// `n` submissions with one generated file each, all made while every
/// packet is dropped. Returns the simulated time to converge after
/// connectivity returns.
pub fn offline_burst(n: usize, min_bytes: usize, max_bytes: usize, seed: u64) -> Result<Duration, String> {
    let env = Env::new();
    env.install("P", "change_detection");
    let flaky = Arc::new(FlakyTransport::new(env.local(), seed));
    let agent = env.agent(flaky.clone(), None);
    agent.refresh_configs().map_err(|e| e.to_string())?;
    flaky.set_online(false);
    let sid = agent.start_session("P").map_err(|e| e.to_string())?.session_id;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut hashes = Vec::new();
    for i in 0..n {
        agent
            .submit_form(&sid, &form(&format!("P{i:03}")))
            .map_err(|e| e.to_string())?;
        let mut bytes = vec![0u8; rng.gen_range(min_bytes..=max_bytes)];
        rng.fill_bytes(&mut bytes);
        hashes.push(sha256_hex(&bytes));
        write_file(&env.watch("P").join(format!("gen-{i:03}.bin")), &bytes, 1000 + i as u64);
        if settle(&agent, &sid).len() != 1 {
            return Err(format!("file {i} was not linked"));
        }
        agent.sync_once().map_err(|e| e.to_string())?;
        env.clock.advance(Duration::from_secs(2));
    }
    if env.server_state() != (0, 0, 0) {
        return Err("server saw traffic while offline".into());
    }

    flaky.set_online(true);
    let spent = drain(&agent, &env.clock, Duration::from_secs(600));
    let state = env.server_state();
    if state != (n, n, n) {
        return Err(format!("server (records, artifacts, linkages) = {state:?}, want {n} each"));
    }
    for h in &hashes {
        if !env.server.blob_exists(h) {
            return Err(format!("blob {h} missing"));
        }
    }
    Ok(spent)
}

pub const BURST_MIN: usize = MIB;
pub const BURST_MAX: usize = 8 * MIB;
