//! Rail health tracking and segment handoff.

mod monitor;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{RailId, Segment};

pub use monitor::{Monitor, Report};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultConfig {
    pub heartbeat_interval: Duration,
    pub suspect_misses: u32,
    pub failed_misses: u32,
    /// Monitor polling period.
    pub tick: Duration,
    /// How long a failed rail's link must look healthy before readmission.
    pub readmit_after: Duration,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval: Duration::from_millis(50),
            suspect_misses: 2,
            failed_misses: 3,
            tick: Duration::from_millis(5),
            readmit_after: Duration::from_secs(1),
        }
    }
}

impl FaultConfig {
    /// Heartbeat silence of `elapsed` counted in whole missed beats.
    pub fn misses(&self, elapsed: Duration) -> u32 {
        (elapsed.as_nanos() / self.heartbeat_interval.as_nanos().max(1)).min(u32::MAX as u128) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthStatus {
    Healthy,
    Suspect,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureCause {
    ChannelDown,
    MissedHeartbeats,
    /// A peer declared the rail failed.
    PeerNotice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub rail: RailId,
    pub from: HealthStatus,
    pub to: HealthStatus,
    pub at: Instant,
    pub cause: Option<FailureCause>,
}

/// What the monitor saw on one rail during one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Observation {
    pub misses: u32,
    pub down: bool,
    pub notice: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RailHealth {
    pub rail: RailId,
    pub status: HealthStatus,
    pub last_heartbeat: Instant,
    pub failure_epoch: u64,
    pub failed_at: Option<Instant>,
    pub cause: Option<FailureCause>,
    /// Start of the current run of clean observations, if the link is clean.
    pub clean_since: Option<Instant>,
}

impl RailHealth {
    pub fn new(rail: RailId, now: Instant) -> Self {
        Self {
            rail,
            status: HealthStatus::Healthy,
            last_heartbeat: now,
            failure_epoch: 0,
            failed_at: None,
            cause: None,
            clean_since: Some(now),
        }
    }

    fn go(&mut self, to: HealthStatus, at: Instant, cause: Option<FailureCause>, out: &mut Vec<Transition>) {
        out.push(Transition { rail: self.rail, from: self.status, to, at, cause });
        self.status = to;
        if to == HealthStatus::Failed {
            self.failure_epoch += 1;
            self.failed_at = Some(at);
            self.cause = cause;
        }
    }

    /// Applies one observation. A hard failure walks Healthy through Suspect
    /// to Failed at the same instant; Failed stays until [`Self::readmit`].
    pub fn step(&mut self, obs: Observation, cfg: &FaultConfig, now: Instant) -> Vec<Transition> {
        let mut out = Vec::new();
        let clean = !obs.down && !obs.notice && obs.misses < cfg.suspect_misses;
        if clean {
            self.clean_since.get_or_insert(now);
        } else {
            self.clean_since = None;
        }
        let cause = if obs.down {
            Some(FailureCause::ChannelDown)
        } else if obs.notice {
            Some(FailureCause::PeerNotice)
        } else if obs.misses >= cfg.failed_misses {
            Some(FailureCause::MissedHeartbeats)
        } else {
            None
        };
        match self.status {
            HealthStatus::Failed => {}
            HealthStatus::Healthy | HealthStatus::Suspect if cause.is_some() => {
                if self.status == HealthStatus::Healthy {
                    self.go(HealthStatus::Suspect, now, None, &mut out);
                }
                self.go(HealthStatus::Failed, now, cause, &mut out);
            }
            HealthStatus::Healthy if obs.misses >= cfg.suspect_misses => self.go(HealthStatus::Suspect, now, None, &mut out),
            HealthStatus::Suspect if obs.misses < cfg.suspect_misses => self.go(HealthStatus::Healthy, now, None, &mut out),
            _ => {}
        }
        out
    }

    /// Checks that a failed rail may rejoin.
    pub fn check_readmit(&self, cfg: &FaultConfig, now: Instant) -> Result<()> {
        let reject = |reason: &str| Err(Error::ReadmitRejected { rail: self.rail, reason: reason.to_string() });
        match self.status {
            HealthStatus::Healthy => reject("rail is not failed"),
            HealthStatus::Suspect => reject("rail is suspect"),
            HealthStatus::Failed => match self.clean_since {
                Some(t) if now.duration_since(t) >= cfg.readmit_after => Ok(()),
                Some(_) => reject("link has not been healthy long enough"),
                None => reject("link is still failing"),
            },
        }
    }

    pub fn readmit(&mut self, now: Instant) -> Transition {
        let t = Transition { rail: self.rail, from: self.status, to: HealthStatus::Healthy, at: now, cause: None };
        self.status = HealthStatus::Healthy;
        self.failed_at = None;
        self.cause = None;
        t
    }
}

/// Health of every rail, shared read-only with the data path.
#[derive(Debug, Clone)]
pub struct HealthTable {
    inner: Arc<RwLock<BTreeMap<RailId, RailHealth>>>,
}

impl HealthTable {
    pub fn new(rails: &[RailId]) -> Self {
        let now = Instant::now();
        Self { inner: Arc::new(RwLock::new(rails.iter().map(|r| (*r, RailHealth::new(*r, now))).collect())) }
    }

    pub fn snapshot(&self) -> BTreeMap<RailId, RailHealth> {
        self.inner.read().expect("health lock").clone()
    }

    pub fn get(&self, rail: RailId) -> Option<RailHealth> {
        self.inner.read().expect("health lock").get(&rail).cloned()
    }

    pub fn status(&self, rail: RailId) -> Option<HealthStatus> {
        self.get(rail).map(|h| h.status)
    }

    pub fn failed(&self) -> BTreeSet<RailId> {
        self.inner.read().expect("health lock").values().filter(|h| h.status == HealthStatus::Failed).map(|h| h.rail).collect()
    }

    pub(crate) fn update<T>(&self, f: impl FnOnce(&mut BTreeMap<RailId, RailHealth>) -> T) -> T {
        f(&mut self.inner.write().expect("health lock"))
    }
}

/// Per-rail cancellation flags observed by running collectives.
#[derive(Debug, Default)]
pub struct AbortFlags {
    flags: BTreeMap<RailId, AtomicBool>,
}

impl AbortFlags {
    pub fn new(rails: &[RailId]) -> Self {
        Self { flags: rails.iter().map(|r| (*r, AtomicBool::new(false))).collect() }
    }

    pub fn flag(&self, rail: RailId) -> Option<&AtomicBool> {
        self.flags.get(&rail)
    }

    pub fn raise(&self, rail: RailId) {
        if let Some(f) = self.flags.get(&rail) {
            f.store(true, Ordering::SeqCst);
        }
    }

    pub fn clear(&self, rail: RailId) {
        if let Some(f) = self.flags.get(&rail) {
            f.store(false, Ordering::SeqCst);
        }
    }

    pub fn is_raised(&self, rail: RailId) -> bool {
        self.flags.get(&rail).is_some_and(|f| f.load(Ordering::SeqCst))
    }
}

/// Orders a surviving rail to finish a failed rail's segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandoffTicket {
    pub op_seq: u32,
    pub segment: Segment,
    pub source: RailId,
    pub target: RailId,
    pub issued: Instant,
}

/// Survivor with the largest current allocation; ties go to the lowest id.
pub fn choose_target(lengths: &[(RailId, u64)], failed: &BTreeSet<RailId>) -> Option<RailId> {
    lengths
        .iter()
        .filter(|(r, _)| !failed.contains(r))
        .max_by(|(ra, la), (rb, lb)| la.cmp(lb).then(rb.cmp(ra)))
        .map(|(r, _)| *r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(misses: u32) -> Observation {
        Observation { misses, ..Default::default() }
    }

    #[test]
    fn heartbeat_ladder() {
        let cfg = FaultConfig::default();
        let t0 = Instant::now();
        let mut h = RailHealth::new(RailId(0), t0);
        assert!(h.step(obs(1), &cfg, t0).is_empty());
        assert_eq!(h.step(obs(2), &cfg, t0)[0].to, HealthStatus::Suspect);
        let t = h.step(obs(3), &cfg, t0);
        assert_eq!((t[0].from, t[0].to, t[0].cause), (HealthStatus::Suspect, HealthStatus::Failed, Some(FailureCause::MissedHeartbeats)));
        assert!(h.step(obs(0), &cfg, t0).is_empty(), "failed is sticky");
        assert_eq!(h.failure_epoch, 1);
    }

    #[test]
    fn stall_below_threshold_recovers() {
        let cfg = FaultConfig::default();
        let t0 = Instant::now();
        let mut h = RailHealth::new(RailId(1), t0);
        // 60 ms of silence is one miss; 100 ms is two.
        assert_eq!(cfg.misses(Duration::from_millis(60)), 1);
        h.step(obs(cfg.misses(Duration::from_millis(100))), &cfg, t0);
        assert_eq!(h.status, HealthStatus::Suspect);
        h.step(obs(0), &cfg, t0);
        assert_eq!(h.status, HealthStatus::Healthy);
        assert_eq!(h.failure_epoch, 0);
    }

    #[test]
    fn channel_down_passes_through_suspect() {
        let cfg = FaultConfig::default();
        let t0 = Instant::now();
        let mut h = RailHealth::new(RailId(0), t0);
        let t = h.step(Observation { down: true, ..Default::default() }, &cfg, t0);
        let path: Vec<_> = t.iter().map(|t| (t.from, t.to)).collect();
        assert_eq!(path, vec![(HealthStatus::Healthy, HealthStatus::Suspect), (HealthStatus::Suspect, HealthStatus::Failed)]);
    }

    #[test]
    fn readmission_rules() {
        let cfg = FaultConfig::default();
        let t0 = Instant::now();
        let mut h = RailHealth::new(RailId(0), t0);
        assert!(h.check_readmit(&cfg, t0).is_err());
        h.step(obs(2), &cfg, t0);
        assert!(matches!(h.check_readmit(&cfg, t0), Err(Error::ReadmitRejected { .. })));
        h.step(obs(3), &cfg, t0);
        assert!(h.check_readmit(&cfg, t0).is_err(), "still failing");
        h.step(obs(0), &cfg, t0);
        assert!(h.check_readmit(&cfg, t0 + Duration::from_millis(500)).is_err());
        h.check_readmit(&cfg, t0 + Duration::from_secs(1)).unwrap();
        h.readmit(t0);
        assert_eq!(h.status, HealthStatus::Healthy);
    }

    #[test]
    fn target_is_largest_survivor() {
        let none = BTreeSet::new();
        let failed: BTreeSet<_> = [RailId(2)].into();
        let lens = [(RailId(0), 10), (RailId(1), 30), (RailId(2), 50)];
        assert_eq!(choose_target(&lens, &failed), Some(RailId(1)));
        assert_eq!(choose_target(&lens, &none), Some(RailId(2)));
        assert_eq!(choose_target(&[(RailId(3), 8), (RailId(1), 8)], &none), Some(RailId(1)));
        assert_eq!(choose_target(&[(RailId(2), 8)], &failed), None);
    }
}
