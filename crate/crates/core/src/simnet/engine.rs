use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balancer::SyncModel;
use crate::collective::{default_chunk_bytes, Algorithm};
use crate::types::{RailId, RailProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    SendStart,
    SendEnd,
    ReduceDone,
    Flush,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub ts_us: f64,
    pub kind: EventKind,
    pub rail: RailId,
    pub rank: usize,
    pub op_seq: u64,
    pub step: u32,
    pub chunk: u32,
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    ev: SimEvent,
    seq: u64,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (&self.ev, &other.ev);
        a.ts_us
            .total_cmp(&b.ts_us)
            .then(a.rank.cmp(&b.rank))
            .then(a.rail.cmp(&b.rail))
            .then(a.kind.cmp(&b.kind))
            .then(self.seq.cmp(&other.seq))
    }
}

/// Min-heap of events ordered by `(timestamp, rank, rail, kind)`, then by
/// insertion order.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<Queued>>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, ev: SimEvent) {
        self.heap.push(Reverse(Queued { ev, seq: self.seq }));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|Reverse(q)| q.ev)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Optional latency inflation once a rail's offered load passes a knee,
/// standing in for collisions and retransmissions on a saturated link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub enabled: bool,
    /// Load at which inflation starts.
    pub knee: f64,
    /// Extra transfer time at full load.
    pub max_extra: f64,
}

impl Default for Penalty {
    fn default() -> Self {
        Self { enabled: false, knee: 0.8, max_extra: 0.25 }
    }
}

impl Penalty {
    pub fn on() -> Self {
        Self { enabled: true, ..Self::default() }
    }

    /// Multiplier on transfer time at offered load `load` (1.0 = saturated).
    pub fn factor(&self, load: f64) -> f64 {
        if !self.enabled || load <= self.knee {
            return 1.0;
        }
        1.0 + self.max_extra * (load - self.knee) / (1.0 - self.knee)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub nodes: usize,
    pub algorithm: Algorithm,
    pub chunk_bytes: Option<u64>,
    pub sync: SyncModel,
    pub penalty: Penalty,
    /// Local reduction speed in bytes/s; infinite makes reduction free.
    pub reduce_bps: f64,
    /// Uniform relative noise on every transfer, drawn from the seeded RNG.
    pub jitter: f64,
}

impl SimParams {
    pub fn new(nodes: usize) -> Self {
        Self {
            nodes,
            algorithm: Algorithm::Ring,
            chunk_bytes: None,
            sync: SyncModel::default(),
            penalty: Penalty::default(),
            reduce_bps: f64::INFINITY,
            jitter: 0.0,
        }
    }
}

/// One rail's share of an operation.
#[derive(Debug, Clone, PartialEq)]
pub struct RailJob {
    pub profile: RailProfile,
    pub bytes: u64,
    /// Offered load used by the congestion penalty.
    pub load: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpTiming {
    /// Per-rail time from operation start to the rail's last delivery.
    pub per_rail_us: Vec<(RailId, f64)>,
    /// Whole-operation latency, including coordination when several rails
    /// are used.
    pub latency_us: f64,
}

#[derive(Debug, Clone, Copy)]
struct RailState {
    link_free: f64,
    setup: f64,
    chunk_xfer: f64,
    reduce: f64,
    chunks_left: u32,
    end: f64,
}

/// Virtual-time executor of ring allreduces. All ranks of a ring behave
/// identically, so one representative rank is simulated per rail.
#[derive(Debug)]
pub struct Simulator {
    params: SimParams,
    queue: EventQueue,
    rng: ChaCha8Rng,
    trace: Option<Vec<SimEvent>>,
    now: f64,
    op_seq: u64,
}

impl Simulator {
    pub fn new(params: SimParams, seed: u64) -> Self {
        Self { params, queue: EventQueue::default(), rng: ChaCha8Rng::seed_from_u64(seed), trace: None, now: 0.0, op_seq: 0 }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn advance_to(&mut self, ts_us: f64) {
        self.now = self.now.max(ts_us);
    }

    pub fn trace(&self) -> &[SimEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Records a control event (flush, failure) at the current time.
    pub fn mark(&mut self, kind: EventKind, rail: RailId) {
        let ev = SimEvent { ts_us: self.now, kind, rail, rank: 0, op_seq: self.op_seq, step: 0, chunk: 0 };
        if let Some(t) = self.trace.as_mut() {
            t.push(ev);
        }
    }

    fn chunks_per_block(&self, bytes: u64) -> u32 {
        let n = self.params.nodes as u64;
        let block = bytes / n;
        match self.params.algorithm {
            Algorithm::Ring => 1,
            Algorithm::RingChunked => {
                let c = self.params.chunk_bytes.unwrap_or_else(|| default_chunk_bytes(bytes, self.params.nodes)).max(1);
                block.div_ceil(c).max(1) as u32
            }
        }
    }

    fn noise(&mut self) -> f64 {
        if self.params.jitter == 0.0 {
            1.0
        } else {
            1.0 + self.params.jitter * self.rng.gen_range(-1.0..=1.0)
        }
    }

    /// Runs one operation starting now and advances the clock to its end.
    pub fn run_op(&mut self, jobs: &[RailJob]) -> OpTiming {
        let start = self.now;
        let op = self.op_seq;
        self.op_seq += 1;
        let n = self.params.nodes.max(2);
        let steps = 2 * (n as u32 - 1);
        let mut states = Vec::with_capacity(jobs.len());
        for (idx, job) in jobs.iter().enumerate() {
            let k = self.chunks_per_block(job.bytes);
            let chunk = job.bytes as f64 / n as f64 / k as f64;
            let setup = job.profile.message_latency_at(0.0);
            let xfer = (job.profile.message_latency_at(chunk) - setup).max(0.0) * self.params.penalty.factor(job.load);
            states.push(RailState {
                link_free: start,
                setup,
                chunk_xfer: xfer,
                reduce: chunk / self.params.reduce_bps * 1e6,
                chunks_left: if job.bytes == 0 { 0 } else { k },
                end: start,
            });
            if job.bytes == 0 {
                continue;
            }
            for j in 0..k {
                self.queue.push(SimEvent {
                    ts_us: start,
                    kind: EventKind::SendStart,
                    rail: RailId(idx as u16),
                    rank: 0,
                    op_seq: op,
                    step: 0,
                    chunk: j,
                });
            }
        }
        while let Some(ev) = self.queue.pop() {
            let i = ev.rail.0 as usize;
            let mut out = ev;
            out.rail = jobs[i].profile.rail_id;
            if let Some(t) = self.trace.as_mut() {
                t.push(out);
            }
            match ev.kind {
                EventKind::SendStart => {
                    let noise = self.noise();
                    let st = &mut states[i];
                    let begin = (ev.ts_us + st.setup).max(st.link_free);
                    st.link_free = begin + st.chunk_xfer * noise;
                    self.queue.push(SimEvent { ts_us: st.link_free, kind: EventKind::SendEnd, ..ev });
                }
                EventKind::SendEnd => {
                    let st = &mut states[i];
                    if ev.step + 1 == steps {
                        st.chunks_left -= 1;
                        st.end = st.end.max(ev.ts_us);
                    } else if (ev.step as usize) < n - 1 {
                        self.queue.push(SimEvent { ts_us: ev.ts_us + st.reduce, kind: EventKind::ReduceDone, ..ev });
                    } else {
                        self.queue.push(SimEvent { kind: EventKind::SendStart, step: ev.step + 1, ..ev });
                    }
                }
                EventKind::ReduceDone => {
                    self.queue.push(SimEvent { kind: EventKind::SendStart, step: ev.step + 1, ..ev });
                }
                EventKind::Flush | EventKind::Fail => {}
            }
        }
        let used: Vec<usize> = (0..jobs.len()).filter(|&i| jobs[i].bytes > 0).collect();
        let per_rail_us: Vec<(RailId, f64)> = used.iter().map(|&i| (jobs[i].profile.rail_id, states[i].end - start)).collect();
        let total: u64 = jobs.iter().map(|j| j.bytes).sum();
        let mut latency = per_rail_us.iter().map(|(_, t)| *t).fold(0.0, f64::max);
        if used.len() > 1 {
            latency += self.params.sync.at_us(total as f64);
        }
        self.now = start + latency;
        OpTiming { per_rail_us, latency_us: latency }
    }
}
