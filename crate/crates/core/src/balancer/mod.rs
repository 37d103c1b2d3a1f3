//! Payload partitioning across rails.
//!
//! Small payloads go to the single fastest rail (cold start); above the
//! crossover size the payload is split by coefficients `alpha` that are
//! refined from measured per-rail latencies (hot start). Splitting is only
//! allowed while the throughput ratio of the two fastest rails stays within
//! `tau`.

mod model;
mod pool;
mod table;

use std::collections::BTreeMap;

pub use model::{
    cold_latency, efficiency_ratio, equalize, find_threshold, hot_latency, init_coefficients, project,
    update_coefficients, LatencyModel, RingModel, Subset, SyncModel, Update,
};
pub use pool::{ComputePool, Grant, Phase as PoolPhase};
pub use table::{AllocationTable, BucketEntry, BucketState, LatencyWindow, Phase, WINDOW_LEN};

use crate::error::{Error, Result};
use crate::types::{round_down_to_element, RailId, Segment, SizeBucket};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BalancerConfig {
    pub tau: f64,
    pub eta: f64,
    pub sync: SyncModel,
    pub convergence_eps: f64,
    pub max_iters: u32,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self { tau: 5.0, eta: 0.05, sync: SyncModel::default(), convergence_eps: 0.01, max_iters: 100 }
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 1.0) {
            return Err(Error::invalid(format!("tau must exceed 1, got {}", self.tau)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::invalid(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if !(self.convergence_eps > 0.0) {
            return Err(Error::invalid("convergence_eps must be positive"));
        }
        Ok(())
    }
}

/// Where one operation's bytes go.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub bytes: u64,
    pub bucket: SizeBucket,
    pub hot: bool,
    /// Fractions over every configured rail; zero for unused ones.
    pub alpha: Vec<f64>,
    /// Non-empty segments in rail order, covering `[0, bytes)`.
    pub segments: Vec<(RailId, Segment)>,
}

impl Allocation {
    pub fn rails(&self) -> impl Iterator<Item = RailId> + '_ {
        self.segments.iter().map(|(r, _)| *r)
    }

    pub fn segment_of(&self, rail: RailId) -> Option<Segment> {
        self.segments.iter().find(|(r, _)| *r == rail).map(|(_, s)| *s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlushEvent {
    pub rail: RailId,
    pub bucket: SizeBucket,
    pub mean_us: f64,
}

/// Lays out `bytes` by `alpha`: each share is rounded down to whole
/// elements and the last used rail takes the remainder.
pub fn segments_for(rails: &[RailId], alpha: &[f64], bytes: u64) -> Vec<(RailId, Segment)> {
    let used: Vec<usize> = (0..rails.len()).filter(|&i| alpha[i] > 0.0).collect();
    let mut out = Vec::with_capacity(used.len());
    let mut offset = 0;
    for (k, &i) in used.iter().enumerate() {
        let len = if k + 1 == used.len() {
            bytes - offset
        } else {
            round_down_to_element((alpha[i] * bytes as f64).floor() as u64).min(bytes - offset)
        };
        if len > 0 {
            out.push((rails[i], Segment::new(offset, len)));
        }
        offset += len;
    }
    if out.is_empty() && !used.is_empty() {
        out.push((rails[used[0]], Segment::new(0, bytes)));
    }
    out
}

/// Allocation state machine shared by live runs and the simulator.
pub struct Balancer {
    cfg: BalancerConfig,
    model: Box<dyn LatencyModel + Send + Sync>,
    rails: Vec<RailId>,
    active: Vec<bool>,
    table: AllocationTable,
    windows: BTreeMap<(RailId, SizeBucket), LatencyWindow>,
    fresh: BTreeMap<SizeBucket, BTreeMap<usize, f64>>,
    thresholds: BTreeMap<Vec<bool>, Option<f64>>,
}

impl std::fmt::Debug for Balancer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Balancer").field("rails", &self.rails).field("active", &self.active).field("table", &self.table).finish()
    }
}

impl Balancer {
    pub fn new(model: Box<dyn LatencyModel + Send + Sync>, cfg: BalancerConfig) -> Result<Self> {
        cfg.validate()?;
        let rails: Vec<RailId> = (0..model.rail_count()).map(|i| model.rail_id(i)).collect();
        if rails.is_empty() {
            return Err(Error::invalid("balancer needs at least one rail"));
        }
        Ok(Self {
            cfg,
            active: vec![true; rails.len()],
            table: AllocationTable::new(rails.clone()),
            rails,
            model,
            windows: BTreeMap::new(),
            fresh: BTreeMap::new(),
            thresholds: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &BalancerConfig {
        &self.cfg
    }

    pub fn rails(&self) -> &[RailId] {
        &self.rails
    }

    pub fn table(&self) -> &AllocationTable {
        &self.table
    }

    pub fn model(&self) -> &dyn LatencyModel {
        self.model.as_ref()
    }

    /// Replaces the table, e.g. from a saved state file.
    pub fn load_table(&mut self, table: AllocationTable) -> Result<()> {
        if table.rails != self.rails {
            return Err(Error::invalid(format!("saved table is for rails {:?}, configured {:?}", table.rails, self.rails)));
        }
        self.table = table;
        Ok(())
    }

    /// Replaces the coordination-cost model; cached thresholds are dropped.
    pub fn set_sync(&mut self, sync: SyncModel) {
        self.cfg.sync = sync;
        self.thresholds.clear();
    }

    fn index(&self, rail: RailId) -> Result<usize> {
        self.rails.iter().position(|r| *r == rail).ok_or(Error::UnknownRail(rail))
    }

    pub fn is_active(&self, rail: RailId) -> bool {
        self.index(rail).map(|i| self.active[i]).unwrap_or(false)
    }

    pub fn active_rails(&self) -> Vec<RailId> {
        self.rails.iter().zip(&self.active).filter(|(_, a)| **a).map(|(r, _)| *r).collect()
    }

    /// Excludes or readmits a rail. While any rail is excluded the table is
    /// read through a restriction and never updated.
    pub fn set_active(&mut self, rail: RailId, active: bool) -> Result<()> {
        let i = self.index(rail)?;
        self.active[i] = active;
        Ok(())
    }

    pub fn degraded(&self) -> bool {
        self.active.iter().any(|a| !a)
    }

    fn active_index(&self) -> Vec<usize> {
        (0..self.rails.len()).filter(|&i| self.active[i]).collect()
    }

    fn subset(&self) -> Subset<'_> {
        Subset { inner: self.model.as_ref(), index: self.active_index() }
    }

    /// Cold/hot crossover for the active rails, `None` if hot never wins.
    pub fn threshold(&mut self) -> Option<f64> {
        let key = self.active.clone();
        if let Some(t) = self.thresholds.get(&key) {
            return *t;
        }
        let sub = self.subset();
        let t = if sub.rail_count() < 2 {
            None
        } else {
            let alpha_at = |s: f64| equalize(&sub, s);
            find_threshold(&sub, &self.cfg.sync, &alpha_at, 1.0, (1u64 << 42) as f64)
        };
        self.thresholds.insert(key, t);
        t
    }

    fn expand(&self, idx: &[usize], local: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.rails.len()];
        for (k, &i) in idx.iter().enumerate() {
            a[i] = local[k];
        }
        a
    }

    fn best_active(&self, bytes: f64) -> RailId {
        cold_latency(&self.subset(), bytes).1
    }

    /// True when the split is allowed at this size (ratio within `tau`).
    pub fn gate_open(&self, bytes: f64) -> bool {
        let sub = self.subset();
        let n = sub.rail_count();
        if n < 2 {
            return false;
        }
        match efficiency_ratio(&sub, &vec![1.0 / n as f64; n], bytes) {
            Ok(rho) => rho <= self.cfg.tau,
            Err(_) => false,
        }
    }

    fn plan(&mut self, bytes: u64) -> BucketEntry {
        let s = bytes as f64;
        let cold = |rail| BucketEntry { state: BucketState::Cold { rail }, iters: 0, phase: Phase::Converged };
        if !self.gate_open(s) {
            return cold(self.best_active(s));
        }
        match self.threshold() {
            Some(t) if s >= t => {
                let idx = self.active_index();
                let uniform = vec![1.0 / idx.len() as f64; idx.len()];
                BucketEntry { state: BucketState::Hot { alpha: self.expand(&idx, &uniform) }, iters: 0, phase: Phase::Probe }
            }
            _ => cold(self.best_active(s)),
        }
    }

    /// Decides the split for a `bytes`-long payload.
    pub fn allocate(&mut self, bytes: u64) -> Allocation {
        let bucket = SizeBucket::of(bytes);
        let entry = if self.degraded() {
            self.table.get(bucket).cloned().unwrap_or_else(|| self.plan(bytes))
        } else {
            match self.table.get(bucket) {
                Some(e) => e.clone(),
                None => {
                    let e = self.plan(bytes);
                    self.table.buckets.insert(bucket, e.clone());
                    e
                }
            }
        };
        let s = bytes as f64;
        let mut alpha = match entry.state {
            BucketState::Cold { rail } => {
                let rail = if self.is_active(rail) { rail } else { self.best_active(s) };
                self.unit(rail)
            }
            BucketState::Hot { alpha } => {
                let restricted: Vec<f64> = alpha.iter().zip(&self.active).map(|(a, on)| if *on { *a } else { 0.0 }).collect();
                if restricted.iter().sum::<f64>() > 0.0 {
                    project(&restricted)
                } else {
                    self.unit(self.best_active(s))
                }
            }
        };
        if alpha.iter().filter(|a| **a > 0.0).count() > 1 && !self.gate_open(s) {
            alpha = self.unit(self.best_active(s));
        }
        let hot = alpha.iter().filter(|a| **a > 0.0).count() > 1;
        let segments = segments_for(&self.rails, &alpha, bytes);
        Allocation { bytes, bucket, hot, alpha, segments }
    }

    fn unit(&self, rail: RailId) -> Vec<f64> {
        let mut a = vec![0.0; self.rails.len()];
        a[self.index(rail).expect("known rail")] = 1.0;
        a
    }

    /// Feeds one per-rail operation cost; returns the flush when this sample
    /// completes a 100-sample window. Flushes drive coefficient updates for
    /// hot buckets once every participating rail has reported.
    pub fn record_latency(&mut self, rail: RailId, bucket: SizeBucket, latency_us: f64) -> Result<Option<FlushEvent>> {
        let i = self.index(rail)?;
        if !(latency_us.is_finite() && latency_us >= 0.0) {
            return Err(Error::InvalidTelemetry(format!("latency {latency_us}")));
        }
        let window = self.windows.entry((rail, bucket)).or_insert_with(|| LatencyWindow::new(rail, bucket));
        let Some(mean) = window.push(latency_us) else {
            return Ok(None);
        };
        if !self.degraded() {
            self.fresh.entry(bucket).or_default().insert(i, mean);
            self.try_update(bucket)?;
        }
        Ok(Some(FlushEvent { rail, bucket, mean_us: mean }))
    }

    /// Records every rail's cost of one operation.
    pub fn observe(&mut self, alloc: &Allocation, per_rail_us: &[(RailId, f64)]) -> Result<Vec<FlushEvent>> {
        let mut out = Vec::new();
        for &(rail, t) in per_rail_us {
            if let Some(ev) = self.record_latency(rail, alloc.bucket, t)? {
                out.push(ev);
            }
        }
        Ok(out)
    }

    fn try_update(&mut self, bucket: SizeBucket) -> Result<()> {
        let Some(entry) = self.table.buckets.get(&bucket).cloned() else {
            self.fresh.remove(&bucket);
            return Ok(());
        };
        let BucketState::Hot { alpha } = &entry.state else {
            self.fresh.remove(&bucket);
            return Ok(());
        };
        if entry.converged() {
            self.fresh.remove(&bucket);
            return Ok(());
        }
        let fresh = self.fresh.get(&bucket).cloned().unwrap_or_default();
        let used: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 0.0).collect();
        if !used.iter().all(|i| fresh.contains_key(i)) {
            return Ok(());
        }
        self.fresh.remove(&bucket);
        let mut next = entry.clone();
        next.iters += 1;
        match entry.phase {
            Phase::Probe => {
                let lat: Vec<f64> = used.iter().map(|i| fresh[i]).collect();
                let local = init_coefficients(&lat)?;
                next.state = BucketState::Hot { alpha: self.expand(&used, &local) };
                next.phase = Phase::Tuning;
            }
            Phase::Tuning | Phase::Converged => {
                let lat: Vec<f64> =
                    (0..alpha.len()).map(|i| fresh.get(&i).copied().unwrap_or_else(|| self.model.latency_us(i, 0.0))).collect();
                let up = update_coefficients(alpha, &lat, self.cfg.eta, self.cfg.convergence_eps)?;
                next.state = BucketState::Hot { alpha: up.alpha };
                if up.converged || next.iters >= self.cfg.max_iters {
                    next.phase = Phase::Converged;
                }
            }
        }
        self.table.buckets.insert(bucket, next);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ProtocolKind, RailProfile};

    fn balancer(spec: &[(f64, f64)], sync_us: f64) -> Balancer {
        let rails: Vec<RailProfile> = spec
            .iter()
            .enumerate()
            .map(|(i, &(t, b))| RailProfile::new(i as u16, ProtocolKind::Tcp, t, b).unwrap())
            .collect();
        Balancer::new(Box::new(rails), BalancerConfig { sync: SyncModel::constant(sync_us), ..Default::default() }).unwrap()
    }

    #[test]
    fn even_split_of_8mb() {
        let mut b = balancer(&[(10.0, 1e9), (10.0, 1e9)], 0.0);
        let a = b.allocate(8 << 20);
        assert!(a.hot);
        assert_eq!(a.segments, vec![(RailId(0), Segment::new(0, 4 << 20)), (RailId(1), Segment::new(4 << 20, 4 << 20))]);
    }

    #[test]
    fn below_threshold_is_cold() {
        let mut b = balancer(&[(10.0, 1e9), (10.0, 1e9)], 100.0);
        // threshold = 2 B T = 2e5 bytes
        let a = b.allocate(1000);
        assert!(!a.hot);
        assert_eq!(a.segments, vec![(RailId(0), Segment::new(0, 1000))]);
        assert!(b.allocate(1 << 20).hot);
    }

    #[test]
    fn degraded_restricts_without_touching_table() {
        let mut b = balancer(&[(10.0, 1e9), (10.0, 1e9)], 0.0);
        b.allocate(1 << 20);
        let before = b.table().clone();
        b.set_active(RailId(0), false).unwrap();
        let a = b.allocate(1 << 20);
        assert_eq!(a.segments, vec![(RailId(1), Segment::new(0, 1 << 20))]);
        for _ in 0..200 {
            b.record_latency(RailId(1), a.bucket, 5.0).unwrap();
        }
        assert_eq!(b.table(), &before);
        b.set_active(RailId(0), true).unwrap();
        assert_eq!(b.allocate(1 << 20).alpha, vec![0.5, 0.5]);
        assert!(matches!(b.set_active(RailId(9), true), Err(Error::UnknownRail(_))));
    }

    #[test]
    fn remainder_goes_to_last_rail() {
        let segs = segments_for(&[RailId(0), RailId(1), RailId(2)], &[1.0 / 3.0; 3], 1000);
        let lens: Vec<u64> = segs.iter().map(|(_, s)| s.len).collect();
        assert_eq!(lens, vec![332, 332, 336]);
        Segment::check_cover(&segs.iter().map(|(_, s)| *s).collect::<Vec<_>>(), 1000).unwrap();
    }

    #[test]
    fn interleaved_buckets_flush_independently() {
        let mut b = balancer(&[(10.0, 1e9)], 0.0);
        let (x, y) = (SizeBucket(10), SizeBucket(20));
        let mut flushes = Vec::new();
        for k in 0..200 {
            let bucket = if k % 2 == 0 { x } else { y };
            if let Some(ev) = b.record_latency(RailId(0), bucket, k as f64).unwrap() {
                flushes.push((k, ev.bucket));
            }
        }
        assert_eq!(flushes, vec![(198, x), (199, y)]);
    }
}
