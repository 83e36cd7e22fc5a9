//! Background scanner and sync loops.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::agent::{Agent, Connectivity};

const REFRESH_EVERY: Duration = Duration::from_secs(60);

pub struct AgentRuntime {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

fn nap(stop: &AtomicBool, total: Duration) {
    let until = Instant::now() + total;
    while !stop.load(Ordering::Relaxed) && Instant::now() < until {
        std::thread::sleep(Duration::from_millis(50).min(total));
    }
}

impl AgentRuntime {
    pub fn start(agent: Arc<Agent>, scan_interval: Duration, sync_interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let scanner = {
            let (agent, stop) = (agent.clone(), stop.clone());
            std::thread::Builder::new()
                .name("lp-scan".into())
                .spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        if let Err(e) = agent.scan_all() {
                            tracing::error!(error = %e, "scan failed");
                        }
                        nap(&stop, scan_interval);
                    }
                })
                .expect("spawn scanner")
        };
        let syncer = {
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("lp-sync".into())
                .spawn(move || {
                    let mut last_refresh: Option<Instant> = None;
                    while !stop.load(Ordering::Relaxed) {
                        let was_offline = agent.connectivity() != Connectivity::Online;
                        if was_offline || last_refresh.is_none_or(|t| t.elapsed() >= REFRESH_EVERY) {
                            match agent.refresh_configs() {
                                Ok(r) => {
                                    last_refresh = Some(Instant::now());
                                    if r.applied > 0 {
                                        tracing::info!(applied = r.applied, version = r.global_version, "configs refreshed");
                                    }
                                }
                                Err(e) => tracing::debug!(error = %e, "config refresh failed"),
                            }
                        }
                        match agent.sync_once() {
                            Ok(r) if r.attempted > 0 => tracing::info!(?r, "sync pass"),
                            Ok(_) => {}
                            Err(e) => tracing::error!(error = %e, "sync failed"),
                        }
                        nap(&stop, sync_interval);
                    }
                })
                .expect("spawn syncer")
        };
        Self { stop, threads: vec![scanner, syncer] }
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for AgentRuntime {
    fn drop(&mut self) {
        self.halt();
    }
}
