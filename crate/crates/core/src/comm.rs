//! Multi-rail allreduce driver for one rank.
//!
//! Each operation is split by the balancer, every rail runs its segment as a
//! sequence of packets, and a commit barrier afterwards lets all ranks agree
//! on failures, completed packets and measured latencies. A failed rail's
//! unfinished packets are restored from the pristine input and replayed on a
//! surviving rail.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::balancer::{Allocation, Balancer, BalancerConfig, LatencyModel, RingModel, SyncModel};
use crate::collective::{ring_allreduce, Algorithm, OpHandle, RingContext};
use crate::error::{Error, Result};
use crate::faults::{choose_target, AbortFlags, FaultConfig, HandoffTicket, HealthStatus, HealthTable, Monitor, Report};
use crate::transport::{ConnectionSet, Frame, MsgType};
use crate::types::{RailId, Segment, ELEMENT_BYTES};

pub const DEFAULT_PACKET_BYTES: u64 = 8 << 20;

/// How per-rail latencies fed to the balancer are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Measured wall time of each rail's executor.
    #[default]
    Wall,
    /// The rail profile's ring model, which makes runs reproducible.
    Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommConfig {
    pub algorithm: Algorithm,
    pub chunk_bytes: Option<u64>,
    pub packet_bytes: u64,
    pub balancer: BalancerConfig,
    pub faults: FaultConfig,
    pub clock: ClockMode,
    /// Replace the balancer's sync cost with a startup measurement.
    pub measure_sync: bool,
    pub stall_timeout: Duration,
    pub barrier_timeout: Duration,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ring,
            chunk_bytes: None,
            packet_bytes: DEFAULT_PACKET_BYTES,
            balancer: BalancerConfig::default(),
            faults: FaultConfig::default(),
            clock: ClockMode::Wall,
            measure_sync: true,
            stall_timeout: Duration::from_secs(30),
            barrier_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandoffRecord {
    pub ticket: HandoffTicket,
    pub failed_at: Instant,
    /// From the Failed transition to the start of the handoff.
    pub resume: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub bytes: u64,
    pub allocation: Allocation,
    /// Agreed (slowest-rank) latency of each rail that carried data.
    pub rail_latency_us: BTreeMap<RailId, f64>,
    pub elapsed: Duration,
    pub handoffs: Vec<HandoffRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct AckPayload {
    failed: BTreeSet<RailId>,
    committed: BTreeMap<RailId, usize>,
    readmit: BTreeSet<RailId>,
    latency_us: BTreeMap<RailId, f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Agreed {
    failed: BTreeSet<RailId>,
    committed: BTreeMap<RailId, usize>,
    readmit: BTreeSet<RailId>,
    latency_us: BTreeMap<RailId, f64>,
}

impl Agreed {
    fn merge(payloads: &[AckPayload]) -> Self {
        let mut out = Agreed::default();
        for (k, p) in payloads.iter().enumerate() {
            out.failed.extend(p.failed.iter().copied());
            for (r, c) in &p.committed {
                let slot = out.committed.entry(*r).or_insert(*c);
                *slot = (*slot).min(*c);
            }
            for (r, t) in &p.latency_us {
                let slot = out.latency_us.entry(*r).or_insert(*t);
                *slot = slot.max(*t);
            }
            out.readmit = if k == 0 { p.readmit.clone() } else { out.readmit.intersection(&p.readmit).copied().collect() };
        }
        out
    }
}

struct RailOutcome {
    committed: usize,
    elapsed: Duration,
    /// When the rail's executor gave up.
    failed_at: Option<Instant>,
}

/// One rank's view of the multi-rail communicator.
pub struct Communicator {
    conns: Arc<ConnectionSet>,
    cfg: CommConfig,
    model: RingModel,
    balancer: Balancer,
    health: HealthTable,
    aborts: Arc<AbortFlags>,
    monitor: Monitor,
    next_seq: u32,
    epoch: u32,
    stash: BTreeMap<u32, BTreeMap<usize, AckPayload>>,
    excluded: BTreeSet<RailId>,
    readmit_requests: BTreeSet<RailId>,
}

impl std::fmt::Debug for Communicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Communicator")
            .field("rank", &self.conns.rank())
            .field("world_size", &self.conns.world_size())
            .field("excluded", &self.excluded)
            .finish()
    }
}

impl Communicator {
    pub fn new(conns: ConnectionSet, cfg: CommConfig) -> Result<Self> {
        if cfg.packet_bytes < ELEMENT_BYTES {
            return Err(Error::invalid("packet_bytes must hold at least one element"));
        }
        let conns = Arc::new(conns);
        let rails = conns.rail_ids();
        let model = RingModel { profiles: conns.rails().to_vec(), node_count: conns.world_size() };
        let balancer = Balancer::new(Box::new(model.clone()), cfg.balancer.clone())?;
        let health = HealthTable::new(&rails);
        let aborts = Arc::new(AbortFlags::new(&rails));
        let monitor = Monitor::spawn(Arc::clone(&conns), health.clone(), Arc::clone(&aborts), cfg.faults);
        let mut comm = Self {
            conns,
            cfg,
            model,
            balancer,
            health,
            aborts,
            monitor,
            next_seq: 1,
            epoch: 0,
            stash: BTreeMap::new(),
            excluded: BTreeSet::new(),
            readmit_requests: BTreeSet::new(),
        };
        if comm.cfg.measure_sync && comm.uses_barrier() {
            let us = comm.measure_sync(5)?;
            comm.balancer.set_sync(SyncModel::constant(us));
        }
        Ok(comm)
    }

    pub fn rank(&self) -> usize {
        self.conns.rank()
    }

    pub fn world_size(&self) -> usize {
        self.conns.world_size()
    }

    pub fn connections(&self) -> &ConnectionSet {
        &self.conns
    }

    pub fn balancer(&self) -> &Balancer {
        &self.balancer
    }

    pub fn balancer_mut(&mut self) -> &mut Balancer {
        &mut self.balancer
    }

    pub fn health(&self) -> &HealthTable {
        &self.health
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    /// Rails every rank has agreed to stop using.
    pub fn excluded(&self) -> &BTreeSet<RailId> {
        &self.excluded
    }

    fn uses_barrier(&self) -> bool {
        self.conns.rails().len() > 1 && self.conns.world_size() > 1
    }

    /// Mean duration of `rounds` empty barriers, agreed as the slowest rank's.
    fn measure_sync(&mut self, rounds: usize) -> Result<f64> {
        let start = Instant::now();
        for _ in 0..rounds {
            self.barrier(AckPayload::default())?;
        }
        let mine = start.elapsed().as_secs_f64() * 1e6 / rounds as f64;
        let probe = RailId(u16::MAX);
        let agreed = self.barrier(AckPayload { latency_us: [(probe, mine)].into(), ..Default::default() })?;
        let us = agreed.latency_us.get(&probe).copied().unwrap_or(mine);
        debug!(rank = self.rank(), sync_us = us, "measured sync overhead");
        Ok(us)
    }

    /// Asks for a failed rail to rejoin at the next commit barrier. It
    /// rejoins only if every rank asks.
    pub fn request_readmit(&mut self, rail: RailId) -> Result<()> {
        let h = self.health.get(rail).ok_or(Error::UnknownRail(rail))?;
        let now = Instant::now();
        if h.status == HealthStatus::Healthy && self.excluded.contains(&rail) {
            // Excluded on another rank's evidence; only the link age matters here.
            match h.clean_since {
                Some(t) if now.duration_since(t) >= self.cfg.faults.readmit_after => {}
                _ => return Err(Error::ReadmitRejected { rail, reason: "link has not been healthy long enough".into() }),
            }
        } else {
            h.check_readmit(&self.cfg.faults, now)?;
        }
        if self.conns.rail_is_down(rail) {
            return Err(Error::ReadmitRejected { rail, reason: "channels are closed".into() });
        }
        self.readmit_requests.insert(rail);
        Ok(())
    }

    /// Runs a commit barrier without data, applying agreed failures and
    /// readmissions.
    pub fn sync(&mut self) -> Result<()> {
        if !self.uses_barrier() {
            return Ok(());
        }
        let payload = AckPayload { failed: self.local_failed(), readmit: self.readmit_requests.clone(), ..Default::default() };
        let agreed = self.barrier(payload)?;
        self.apply(&agreed);
        Ok(())
    }

    fn local_failed(&self) -> BTreeSet<RailId> {
        let mut f = self.health.failed();
        f.extend(self.excluded.iter().copied());
        f.retain(|r| !self.readmit_requests.contains(r));
        f
    }

    fn apply(&mut self, agreed: &Agreed) {
        for &r in &agreed.failed {
            if self.excluded.insert(r) {
                self.aborts.raise(r);
                let _ = self.balancer.set_active(r, false);
                info!(rank = self.rank(), rail = %r, "rail excluded");
            }
        }
        for &r in &agreed.readmit {
            if agreed.failed.contains(&r) {
                continue;
            }
            if self.excluded.remove(&r) {
                self.health.update(|m| m.get_mut(&r).map(|h| h.readmit(Instant::now())));
                self.aborts.clear(r);
                let _ = self.balancer.set_active(r, true);
                info!(rank = self.rank(), rail = %r, "rail readmitted");
            }
        }
        self.readmit_requests.retain(|r| !agreed.readmit.contains(r));
    }

    /// Sum-allreduces `data` in place with every rank.
    pub fn allreduce(&mut self, data: &mut [f32]) -> Result<OpReport> {
        let start = Instant::now();
        let bytes = data.len() as u64 * ELEMENT_BYTES;
        let allocation = self.balancer.allocate(bytes);
        let pristine = data.to_vec();
        let mut work: BTreeMap<RailId, Vec<Segment>> =
            allocation.segments.iter().map(|(r, s)| (*r, packets(*s, self.cfg.packet_bytes))).collect();
        let mut rail_latency_us = BTreeMap::new();
        let mut handoffs = Vec::new();
        let mut disturbed = false;
        loop {
            let base = self.next_seq;
            let total: usize = work.values().map(Vec::len).sum();
            self.next_seq = self.next_seq.wrapping_add(total as u32);
            let outcomes = self.execute(&work, data, base)?;
            let mut payload = AckPayload { readmit: self.readmit_requests.clone(), ..Default::default() };
            for (rail, out) in &outcomes {
                payload.committed.insert(*rail, out.committed);
                payload.latency_us.insert(*rail, self.latency_of(*rail, &work[rail], out.elapsed));
                if let Some(at) = &out.failed_at {
                    payload.failed.insert(*rail);
                    self.monitor.report(Report::Down { rail: *rail, at: *at });
                    if self.conns.rail_is_down(*rail) {
                        self.conns.close_rail(*rail);
                    }
                }
            }
            payload.failed.extend(self.local_failed());
            let agreed = if self.uses_barrier() {
                self.barrier(payload)?
            } else {
                Agreed::merge(&[payload])
            };
            self.apply(&agreed);

            let mut next: BTreeMap<RailId, Vec<Segment>> = BTreeMap::new();
            let mut seq = base;
            for (rail, pk) in &work {
                let first_seq = seq;
                seq = seq.wrapping_add(pk.len() as u32);
                if !agreed.failed.contains(rail) {
                    if !disturbed {
                        rail_latency_us.insert(*rail, agreed.latency_us.get(rail).copied().unwrap_or(0.0));
                    }
                    continue;
                }
                disturbed = true;
                let done = agreed.committed.get(rail).copied().unwrap_or(0).min(pk.len());
                let rest = &pk[done..];
                if rest.is_empty() {
                    continue;
                }
                for s in rest {
                    data[s.elements()].copy_from_slice(&pristine[s.elements()]);
                }
                let lengths: Vec<(RailId, u64)> =
                    self.conns.rail_ids().into_iter().map(|r| (r, allocation.segment_of(r).map_or(0, |s| s.len))).collect();
                let op_seq = first_seq.wrapping_add(done as u32);
                let Some(target) = choose_target(&lengths, &agreed.failed) else {
                    return Err(Error::Unrecoverable { op_seq });
                };
                let span = Segment::new(rest[0].offset, rest.last().expect("non-empty").end() - rest[0].offset);
                let issued = Instant::now();
                let failed_at = self
                    .health
                    .get(*rail)
                    .and_then(|h| h.failed_at)
                    .into_iter()
                    .chain(outcomes.get(rail).and_then(|o| o.failed_at))
                    .min()
                    .unwrap_or(issued);
                let ticket = HandoffTicket { op_seq, segment: span, source: *rail, target, issued };
                info!(rank = self.rank(), source = %rail, target = %target, offset = span.offset, len = span.len, "handoff");
                handoffs.push(HandoffRecord { ticket, failed_at, resume: issued.saturating_duration_since(failed_at) });
                next.entry(target).or_default().extend_from_slice(rest);
            }
            if next.is_empty() {
                break;
            }
            for v in next.values_mut() {
                v.sort_by_key(|s| s.offset);
            }
            work = next;
        }
        if !disturbed && !self.balancer.degraded() {
            let samples: Vec<(RailId, f64)> = rail_latency_us.iter().map(|(r, t)| (*r, *t)).collect();
            self.balancer.observe(&allocation, &samples)?;
        }
        Ok(OpReport { bytes, allocation, rail_latency_us, elapsed: start.elapsed(), handoffs })
    }

    fn latency_of(&self, rail: RailId, work: &[Segment], elapsed: Duration) -> f64 {
        match self.cfg.clock {
            ClockMode::Wall => elapsed.as_secs_f64() * 1e6,
            ClockMode::Model => {
                let i = self.conns.rail_ids().iter().position(|r| *r == rail).expect("known rail");
                let bytes: u64 = work.iter().map(|s| s.len).sum();
                self.model.latency_us(i, bytes as f64)
            }
        }
    }

    /// Runs every rail's packets concurrently, one executor thread per rail.
    fn execute(&self, work: &BTreeMap<RailId, Vec<Segment>>, data: &mut [f32], base: u32) -> Result<BTreeMap<RailId, RailOutcome>> {
        let mut items: Vec<(RailId, usize, Segment)> =
            work.iter().flat_map(|(r, pk)| pk.iter().enumerate().map(move |(i, s)| (*r, i, *s))).collect();
        items.sort_by_key(|(_, _, s)| s.offset);
        let mut slices: BTreeMap<RailId, Vec<(usize, Segment, &mut [f32])>> = BTreeMap::new();
        let mut rest: &mut [f32] = data;
        let mut cursor = 0usize;
        for (rail, i, seg) in items {
            let r = seg.elements();
            if r.start < cursor {
                return Err(Error::invalid("overlapping packets"));
            }
            let (_, tail) = std::mem::take(&mut rest).split_at_mut(r.start - cursor);
            let (head, tail) = tail.split_at_mut(r.len());
            slices.entry(rail).or_default().push((i, seg, head));
            rest = tail;
            cursor = r.end;
        }
        let mut seq_of = BTreeMap::new();
        let mut seq = base;
        for (rail, pk) in work {
            seq_of.insert(*rail, seq);
            seq = seq.wrapping_add(pk.len() as u32);
        }
        let world = self.conns.world_size();
        let conns: &ConnectionSet = &self.conns;
        let aborts: &AbortFlags = &self.aborts;
        let cfg = &self.cfg;
        let outcomes = std::thread::scope(|s| {
            let handles: Vec<_> = slices
                .into_iter()
                .map(|(rail, mut pk)| {
                    let first = seq_of[&rail];
                    s.spawn(move || {
                        pk.sort_by_key(|(i, _, _)| *i);
                        let t0 = Instant::now();
                        let mut ctx = RingContext::new(conns);
                        ctx.stall_timeout = cfg.stall_timeout;
                        if let Some(flag) = aborts.flag(rail) {
                            ctx = ctx.with_abort(flag);
                        }
                        let mut committed = 0;
                        for (i, seg, slice) in pk {
                            if world < 2 {
                                committed += 1;
                                continue;
                            }
                            let mut h = OpHandle::new(first.wrapping_add(i as u32), seg, rail, cfg.algorithm);
                            if let Some(c) = cfg.chunk_bytes {
                                h = h.with_chunk_bytes(c);
                            }
                            let r = if aborts.is_raised(rail) {
                                Err(Error::OperationAborted { op_seq: h.op_seq, rail, segment: seg })
                            } else {
                                ring_allreduce(&h, slice, &ctx)
                            };
                            if let Err(e) = r {
                                let out = RailOutcome { committed, elapsed: t0.elapsed(), failed_at: Some(Instant::now()) };
                                return (rail, out, Some(e));
                            }
                            committed += 1;
                        }
                        (rail, RailOutcome { committed, elapsed: t0.elapsed(), failed_at: None }, None)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("rail executor panicked")).collect::<Vec<_>>()
        });
        let mut out = BTreeMap::new();
        for (rail, o, err) in outcomes {
            match err {
                Some(e) if !e.is_rail_failure() => return Err(e),
                _ => {}
            }
            out.insert(rail, o);
        }
        Ok(out)
    }

    /// All-to-all exchange of commit records over every usable rail.
    fn barrier(&mut self, payload: AckPayload) -> Result<Agreed> {
        let epoch = self.epoch;
        self.epoch = self.epoch.wrapping_add(1);
        let rank = self.rank();
        let world = self.world_size();
        let body = serde_json::to_vec(&payload)?;
        let mut got: BTreeMap<usize, AckPayload> = self.stash.remove(&epoch).unwrap_or_default();
        got.insert(rank, payload);
        let live: Vec<RailId> =
            self.conns.rail_ids().into_iter().filter(|r| !self.excluded.contains(r) && !self.conns.rail_is_down(*r)).collect();
        for &rail in &live {
            for peer in (0..world).filter(|p| *p != rank) {
                if let Some(ch) = self.conns.channel(rail, peer) {
                    let frame = Frame { msg_type: MsgType::Ack, op_seq: epoch, chunk_index: rank as u32, offset: 0, payload: body.clone() };
                    let _ = ch.send_frame(frame);
                }
            }
        }
        let deadline = Instant::now() + self.cfg.barrier_timeout;
        while got.len() < world {
            let mut progressed = false;
            let waiting: Vec<usize> = (0..world).filter(|p| !got.contains_key(p)).collect();
            for peer in waiting {
                let mut reachable = false;
                for rail in self.conns.rail_ids() {
                    let Some(ch) = self.conns.channel(rail, peer) else { continue };
                    loop {
                        match ch.try_recv_control() {
                            Ok(Some(f)) => {
                                reachable = true;
                                if f.msg_type != MsgType::Ack || wrapping_before(f.op_seq, epoch) {
                                    continue;
                                }
                                let p: AckPayload = serde_json::from_slice(&f.payload)?;
                                let from = f.chunk_index as usize;
                                if f.op_seq == epoch {
                                    got.entry(from).or_insert(p);
                                    progressed = true;
                                } else {
                                    self.stash.entry(f.op_seq).or_default().entry(from).or_insert(p);
                                }
                            }
                            Ok(None) => {
                                reachable = true;
                                break;
                            }
                            Err(_) => break,
                        }
                    }
                }
                if !reachable && !got.contains_key(&peer) {
                    return Err(Error::Unrecoverable { op_seq: self.next_seq });
                }
            }
            if got.len() >= world {
                break;
            }
            if !progressed {
                if Instant::now() > deadline {
                    return Err(Error::Timeout(self.cfg.barrier_timeout));
                }
                std::thread::sleep(Duration::from_micros(200));
            }
        }
        let all: Vec<AckPayload> = got.into_values().collect();
        Ok(Agreed::merge(&all))
    }
}

fn wrapping_before(a: u32, b: u32) -> bool {
    a != b && b.wrapping_sub(a) < u32::MAX / 2
}

/// Cuts a segment into element-aligned packets of at most `packet_bytes`.
pub fn packets(seg: Segment, packet_bytes: u64) -> Vec<Segment> {
    let step = (packet_bytes - packet_bytes % ELEMENT_BYTES).max(ELEMENT_BYTES);
    if seg.len == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut off = seg.offset;
    while off < seg.end() {
        let len = step.min(seg.end() - off);
        out.push(Segment::new(off, len));
        off += len;
    }
    out
}
