use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use crossbeam_channel::{self as cb, Receiver, Sender};
use tracing::{debug, warn};

use super::{AbortFlags, FailureCause, FaultConfig, HealthStatus, HealthTable, Observation, Transition};
use crate::transport::ConnectionSet;
use crate::types::RailId;

/// Failure evidence gathered outside the monitor, e.g. by a collective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Report {
    Down { rail: RailId, at: Instant },
}

/// Control worker that sends heartbeats, classifies rails and is the only
/// writer of the health table.
#[derive(Debug)]
pub struct Monitor {
    stop: Arc<AtomicBool>,
    inbox: Sender<Report>,
    transitions: Receiver<Transition>,
    handle: Option<JoinHandle<()>>,
}

impl Monitor {
    pub fn spawn(conns: Arc<ConnectionSet>, health: HealthTable, aborts: Arc<AbortFlags>, cfg: FaultConfig) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let (inbox, inbox_rx) = cb::unbounded();
        let (tx, transitions) = cb::unbounded();
        let st = Arc::clone(&stop);
        let handle = thread::Builder::new()
            .name(format!("nezha-monitor-{}", conns.rank()))
            .spawn(move || run(&conns, &health, &aborts, &cfg, &st, &inbox_rx, &tx))
            .expect("spawn monitor");
        Self { stop, inbox, transitions, handle: Some(handle) }
    }

    pub fn report(&self, report: Report) {
        let _ = self.inbox.send(report);
    }

    pub fn transitions(&self) -> &Receiver<Transition> {
        &self.transitions
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Monitor {
    fn drop(&mut self) {
        self.stop();
    }
}

fn run(
    conns: &ConnectionSet,
    health: &HealthTable,
    aborts: &AbortFlags,
    cfg: &FaultConfig,
    stop: &AtomicBool,
    inbox: &Receiver<Report>,
    out: &Sender<Transition>,
) {
    let rails = conns.rail_ids();
    let mut epoch = 0u32;
    let started = Instant::now();
    let mut next_beat = started;
    while !stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= next_beat {
            for ch in conns.channels() {
                ch.send_health(epoch);
            }
            epoch = epoch.wrapping_add(1);
            next_beat = now + cfg.heartbeat_interval;
        }
        let mut reported: BTreeMap<RailId, Instant> = BTreeMap::new();
        for Report::Down { rail, at } in inbox.try_iter() {
            let slot = reported.entry(rail).or_insert(at);
            *slot = (*slot).min(at);
        }
        let mut noticed = Vec::new();
        for ch in conns.channels() {
            if let Some(r) = ch.take_handoff_notice() {
                noticed.push(r);
            }
        }
        let fresh = health.update(|map| {
            let mut all = Vec::new();
            for &rail in &rails {
                let Some(h) = map.get_mut(&rail) else { continue };
                let oldest = conns.rail_channels(rail).filter(|c| !c.departed()).map(|c| c.last_heartbeat()).min();
                if let Some(t) = oldest {
                    h.last_heartbeat = t;
                }
                // Silence before the monitor existed is not evidence.
                let misses = oldest.map(|t| cfg.misses(now.saturating_duration_since(t.max(started)))).unwrap_or(0);
                let obs = Observation {
                    misses,
                    down: conns.rail_is_down(rail) || reported.contains_key(&rail),
                    notice: noticed.contains(&rail),
                };
                let at = reported.get(&rail).copied().unwrap_or(now).min(now);
                all.extend(h.step(obs, cfg, at));
            }
            all
        });
        for t in fresh {
            if t.to == HealthStatus::Failed {
                aborts.raise(t.rail);
                match t.cause {
                    Some(FailureCause::ChannelDown) => conns.close_rail(t.rail),
                    Some(FailureCause::MissedHeartbeats) => {
                        for ch in conns.channels().filter(|c| c.rail != t.rail) {
                            ch.send_handoff_notice(t.rail);
                        }
                    }
                    _ => {}
                }
                warn!(rank = conns.rank(), rail = %t.rail, cause = ?t.cause, "rail failed");
            } else {
                debug!(rank = conns.rank(), rail = %t.rail, from = ?t.from, to = ?t.to, "rail health");
            }
            let _ = out.send(t);
        }
        thread::sleep(cfg.tick);
    }
}
