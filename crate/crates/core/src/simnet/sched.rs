use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::engine::{EventKind, OpTiming, RailJob, SimParams, Simulator};
use crate::balancer::{segments_for, Allocation, Balancer, BalancerConfig, LatencyModel, RingModel};
use crate::error::{Error, Result};
use crate::types::{RailId, RailProfile, SizeBucket};

pub const DEFAULT_SLICE_BYTES: u64 = 16 << 10;
pub const DEFAULT_SLICE_OVERHEAD_US: f64 = 20.0;

/// How a payload is spread over rails in the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scheduler {
    /// The production balancer, run to convergence.
    Nezha,
    /// A fixed split; bandwidth-proportional when `alpha` is absent.
    Fixed {
        #[serde(default)]
        alpha: Option<Vec<f64>>,
    },
    /// Fixed-size slices, each sent as its own allreduce on whichever rail
    /// frees up first (lowest id on ties). No cross-rail coordination.
    Slice {
        #[serde(default = "default_slice")]
        slice_bytes: u64,
        #[serde(default = "default_overhead")]
        overhead_us: f64,
    },
}

fn default_slice() -> u64 {
    DEFAULT_SLICE_BYTES
}

fn default_overhead() -> f64 {
    DEFAULT_SLICE_OVERHEAD_US
}

impl Scheduler {
    pub fn fixed(alpha: Vec<f64>) -> Self {
        Scheduler::Fixed { alpha: Some(alpha) }
    }

    pub fn proportional() -> Self {
        Scheduler::Fixed { alpha: None }
    }

    pub fn slice() -> Self {
        Scheduler::Slice { slice_bytes: DEFAULT_SLICE_BYTES, overhead_us: DEFAULT_SLICE_OVERHEAD_US }
    }

    /// Short label for reports.
    pub fn label(&self) -> String {
        match self {
            Scheduler::Nezha => "nezha".into(),
            Scheduler::Fixed { alpha: None } => "fixed".into(),
            Scheduler::Fixed { alpha: Some(a) } => {
                format!("fixed-{}", a.iter().map(|x| format!("{}", (x * 100.0).round())).collect::<Vec<_>>().join("/"))
            }
            Scheduler::Slice { .. } => "slice".into(),
        }
    }
}

impl std::str::FromStr for Scheduler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nezha" => Ok(Scheduler::Nezha),
            "fixed" => Ok(Scheduler::proportional()),
            "slice" => Ok(Scheduler::slice()),
            other => Err(Error::invalid(format!("unknown scheduler {other:?}"))),
        }
    }
}

/// Outcome of simulating one payload size under one scheduler.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub bytes: u64,
    pub scheduler: String,
    /// Mean latency over the measured operations.
    pub latency_us: f64,
    pub alpha: Vec<f64>,
    pub hot: bool,
    /// Operations run before measuring.
    pub warmup_ops: usize,
    pub flushes: usize,
}

/// Runs allreduces in virtual time, memoising identical noiseless ops.
pub struct SimBench<'a> {
    profiles: &'a [RailProfile],
    sim: Simulator,
    memo: HashMap<Vec<(u64, u64)>, OpTiming>,
    b_ref: f64,
}

impl<'a> SimBench<'a> {
    pub fn new(profiles: &'a [RailProfile], params: SimParams, seed: u64) -> Self {
        let b_ref = profiles.iter().map(|p| p.bandwidth_bps).fold(0.0, f64::max);
        Self { profiles, sim: Simulator::new(params, seed), memo: HashMap::new(), b_ref }
    }

    pub fn simulator(&mut self) -> &mut Simulator {
        &mut self.sim
    }

    pub fn model(&self) -> RingModel {
        RingModel { profiles: self.profiles.to_vec(), node_count: self.sim.params().nodes }
    }

    /// Offered load of a rail carrying fraction `alpha` of the traffic,
    /// relative to the fastest rail.
    pub fn load(&self, i: usize, alpha: f64) -> f64 {
        let b = self.profiles[i].bandwidth_bps;
        if b.is_infinite() || self.b_ref.is_infinite() {
            return alpha;
        }
        alpha * self.b_ref / b
    }

    /// Runs one operation with `bytes_per_rail[i]` bytes on rail `i`.
    pub fn run(&mut self, bytes_per_rail: &[u64]) -> OpTiming {
        let total: u64 = bytes_per_rail.iter().sum::<u64>().max(1);
        let jobs: Vec<RailJob> = bytes_per_rail
            .iter()
            .enumerate()
            .map(|(i, &b)| RailJob { profile: self.profiles[i].clone(), bytes: b, load: self.load(i, b as f64 / total as f64) })
            .collect();
        let cacheable = self.sim.params().jitter == 0.0 && self.sim.trace().is_empty();
        let key: Vec<(u64, u64)> = jobs.iter().map(|j| (j.bytes, j.load.to_bits())).collect();
        if cacheable {
            if let Some(t) = self.memo.get(&key) {
                let t = t.clone();
                let now = self.sim.now();
                self.sim.advance_to(now + t.latency_us);
                return t;
            }
        }
        let t = self.sim.run_op(&jobs);
        if cacheable {
            self.memo.insert(key, t.clone());
        }
        t
    }

    fn bytes_of(&self, alloc: &Allocation) -> Vec<u64> {
        self.profiles.iter().map(|p| alloc.segment_of(p.rail_id).map_or(0, |s| s.len)).collect()
    }

    /// Drives `balancer` until the bucket of `bytes` stops changing, then
    /// measures `iters` operations.
    pub fn run_nezha(&mut self, balancer: &mut Balancer, bytes: u64, iters: usize) -> Result<SimResult> {
        let bucket = SizeBucket::of(bytes);
        let mut warmup = 0;
        let mut flushes = 0;
        loop {
            let alloc = balancer.allocate(bytes);
            let settled = balancer.table().get(bucket).is_none_or(|e| e.converged()) || balancer.degraded();
            if settled {
                break;
            }
            let t = self.run(&self.bytes_of(&alloc));
            for ev in balancer.observe(&alloc, &t.per_rail_us)? {
                self.sim.mark(EventKind::Flush, ev.rail);
                flushes += 1;
            }
            warmup += 1;
        }
        let mut total = 0.0;
        let mut last = balancer.allocate(bytes);
        for _ in 0..iters.max(1) {
            last = balancer.allocate(bytes);
            total += self.run(&self.bytes_of(&last)).latency_us;
        }
        Ok(SimResult {
            bytes,
            scheduler: "nezha".into(),
            latency_us: total / iters.max(1) as f64,
            alpha: last.alpha.clone(),
            hot: last.hot,
            warmup_ops: warmup,
            flushes,
        })
    }

    pub fn run_fixed(&mut self, alpha: &[f64], bytes: u64, iters: usize) -> Result<SimResult> {
        if alpha.len() != self.profiles.len() {
            return Err(Error::invalid(format!("{} ratios for {} rails", alpha.len(), self.profiles.len())));
        }
        let ids: Vec<RailId> = self.profiles.iter().map(|p| p.rail_id).collect();
        let segs = segments_for(&ids, alpha, bytes);
        let per: Vec<u64> = ids.iter().map(|r| segs.iter().find(|(x, _)| x == r).map_or(0, |(_, s)| s.len)).collect();
        let mut total = 0.0;
        for _ in 0..iters.max(1) {
            total += self.run(&per).latency_us;
        }
        let used = per.iter().filter(|b| **b > 0).count();
        let actual: Vec<f64> = per.iter().map(|b| *b as f64 / bytes.max(1) as f64).collect();
        Ok(SimResult {
            bytes,
            scheduler: Scheduler::Fixed { alpha: Some(alpha.to_vec()) }.label(),
            latency_us: total / iters.max(1) as f64,
            alpha: actual,
            hot: used > 1,
            warmup_ops: 0,
            flushes: 0,
        })
    }

    pub fn proportional_alpha(&self) -> Vec<f64> {
        let total: f64 = self.profiles.iter().map(|p| p.bandwidth_bps).sum();
        self.profiles.iter().map(|p| p.bandwidth_bps / total).collect()
    }

    pub fn run_slice(&mut self, slice_bytes: u64, overhead_us: f64, bytes: u64) -> Result<SimResult> {
        if slice_bytes == 0 {
            return Err(Error::invalid("slice size must be positive"));
        }
        let n = self.profiles.len();
        let mut free = vec![0.0f64; n];
        let mut carried = vec![0u64; n];
        let mut left = bytes;
        let mut cost: HashMap<(usize, u64), f64> = HashMap::new();
        while left > 0 {
            let len = slice_bytes.min(left);
            left -= len;
            let i = (0..n).min_by(|&a, &b| free[a].total_cmp(&free[b]).then(a.cmp(&b))).expect("at least one rail");
            let c = match cost.get(&(i, len)) {
                Some(c) => *c,
                None => {
                    let mut per = vec![0u64; n];
                    per[i] = len;
                    let c = self.run(&per).latency_us + overhead_us;
                    cost.insert((i, len), c);
                    c
                }
            };
            free[i] += c;
            carried[i] += len;
        }
        Ok(SimResult {
            bytes,
            scheduler: "slice".into(),
            latency_us: free.iter().copied().fold(0.0, f64::max),
            alpha: carried.iter().map(|c| *c as f64 / bytes.max(1) as f64).collect(),
            hot: carried.iter().filter(|c| **c > 0).count() > 1,
            warmup_ops: 0,
            flushes: 0,
        })
    }
}

/// Simulates `bytes` under `scheduler` and returns the steady-state latency.
pub fn simulate_allreduce(
    profiles: &[RailProfile],
    scheduler: &Scheduler,
    params: &SimParams,
    bytes: u64,
    iters: usize,
    seed: u64,
) -> Result<SimResult> {
    let mut bench = SimBench::new(profiles, params.clone(), seed);
    match scheduler {
        Scheduler::Nezha => {
            let cfg = BalancerConfig { sync: params.sync, ..Default::default() };
            let mut balancer = Balancer::new(Box::new(bench.model()), cfg)?;
            bench.run_nezha(&mut balancer, bytes, iters)
        }
        Scheduler::Fixed { alpha } => {
            let a = alpha.clone().unwrap_or_else(|| bench.proportional_alpha());
            let mut r = bench.run_fixed(&a, bytes, iters)?;
            if alpha.is_none() {
                r.scheduler = "fixed".into();
            }
            Ok(r)
        }
        Scheduler::Slice { slice_bytes, overhead_us } => bench.run_slice(*slice_bytes, *overhead_us, bytes),
    }
}

/// Latency of each rail used alone, as the simulator measures it.
pub fn single_rail_latencies(profiles: &[RailProfile], params: &SimParams, bytes: u64) -> Vec<f64> {
    let mut bench = SimBench::new(profiles, params.clone(), 0);
    (0..profiles.len())
        .map(|i| {
            let mut per = vec![0u64; profiles.len()];
            per[i] = bytes;
            bench.run(&per).latency_us
        })
        .collect()
}

/// Cold/hot crossover the balancer computes for `profiles` on `nodes` nodes.
pub fn threshold_bytes(profiles: &[RailProfile], params: &SimParams) -> Result<Option<f64>> {
    let model = RingModel { profiles: profiles.to_vec(), node_count: params.nodes };
    if model.rail_count() < 2 {
        return Ok(None);
    }
    let cfg = BalancerConfig { sync: params.sync, ..Default::default() };
    let mut b = Balancer::new(Box::new(model), cfg)?;
    Ok(b.threshold())
}
