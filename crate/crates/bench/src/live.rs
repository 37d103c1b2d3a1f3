use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use nezha::balancer::{AllocationTable, BucketEntry, BucketState, Phase};
use nezha::comm::{ClockMode, CommConfig, Communicator, OpReport};
use nezha::simnet::Scheduler;
use nezha::transport::{memory_mesh, rendezvous, ConnectionSet, MemoryStore, MeshOptions, RendezvousStore};
use nezha::{RailProfile, SizeBucket};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BenchConfig, Transport};
use crate::record::BenchRecord;

/// Largest error allowed relative to the sum of magnitudes being added.
pub const SUM_TOLERANCE: f64 = 1e-5;

pub fn comm_config(cfg: &BenchConfig) -> CommConfig {
    let model_clock = cfg.transport == Transport::Inmem;
    CommConfig {
        algorithm: cfg.algorithm,
        clock: if model_clock { ClockMode::Model } else { ClockMode::Wall },
        measure_sync: !model_clock,
        ..Default::default()
    }
}

/// Rank `rank`'s input for a given size: reproducible from the seed alone,
/// so every rank can rebuild every other rank's data.
pub fn rank_input(seed: u64, size: u64, rank: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ size.rotate_left(17) ^ (rank as u64).rotate_left(48));
    (0..(size / 4).max(1)).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Exact sums and the sum of magnitudes per element.
pub fn oracle(inputs: &[Vec<f32>]) -> (Vec<f64>, Vec<f64>) {
    let n = inputs[0].len();
    let mut sum = vec![0.0f64; n];
    let mut mag = vec![0.0f64; n];
    for v in inputs {
        for (i, x) in v.iter().enumerate() {
            sum[i] += *x as f64;
            mag[i] += x.abs() as f64;
        }
    }
    (sum, mag)
}

/// Worst per-element error, relative to the magnitudes summed there.
pub fn relative_error(got: &[f32], sum: &[f64], mag: &[f64]) -> f64 {
    got.iter()
        .zip(sum.iter().zip(mag))
        .map(|(g, (s, m))| (*g as f64 - s).abs() / m.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn fixed_table(comm: &Communicator, alpha: &[f64], sizes: &[u64]) -> Result<AllocationTable> {
    let rails = comm.connections().rail_ids();
    if alpha.len() != rails.len() {
        bail!("{} ratios for {} rails", alpha.len(), rails.len());
    }
    let mut t = AllocationTable::new(rails);
    for s in sizes {
        t.buckets.insert(
            SizeBucket::of(*s),
            BucketEntry { state: BucketState::Hot { alpha: alpha.to_vec() }, iters: 0, phase: Phase::Converged },
        );
    }
    Ok(t)
}

fn op_latency(comm: &Communicator, clock: ClockMode, rep: &OpReport) -> f64 {
    match clock {
        ClockMode::Wall => rep.elapsed.as_secs_f64() * 1e6,
        ClockMode::Model => {
            let worst = rep.rail_latency_us.values().copied().fold(0.0, f64::max);
            let sync = if rep.allocation.hot { comm.balancer().config().sync.at_us(rep.bytes as f64) } else { 0.0 };
            worst + sync
        }
    }
}

fn bytes_sent(conns: &ConnectionSet) -> u64 {
    conns.rail_ids().into_iter().map(|r| conns.bytes_sent(r)).sum()
}

/// Runs the whole sweep on one rank and returns its rows.
pub fn run_rank(conns: ConnectionSet, cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    let rank = conns.rank();
    let world = conns.world_size();
    let rail_ids = conns.rail_ids();
    let ccfg = comm_config(cfg);
    let mut comm = Communicator::new(conns, ccfg.clone())?;
    match &cfg.scheduler {
        Scheduler::Nezha => {
            if let Some(p) = cfg.balancer_state.as_ref().filter(|p| p.exists()) {
                let table = AllocationTable::load(p).with_context(|| format!("loading {}", p.display()))?;
                comm.balancer_mut().load_table(table)?;
            }
        }
        Scheduler::Fixed { alpha } => {
            let a = alpha.clone().unwrap_or_else(|| {
                let total: f64 = comm.connections().rails().iter().map(|r| r.bandwidth_bps).sum();
                comm.connections().rails().iter().map(|r| r.bandwidth_bps / total).collect()
            });
            let t = fixed_table(&comm, &a, &cfg.sizes)?;
            comm.balancer_mut().load_table(t)?;
        }
        Scheduler::Slice { .. } => bail!("the slice scheduler is only available in simulated presets"),
    }

    let start = Instant::now();
    let mut pending = cfg.failures.clone();
    let mut out = Vec::with_capacity(cfg.sizes.len());
    for &size in &cfg.sizes {
        let input = rank_input(cfg.seed, size, rank);
        let check = cfg.verify.then(|| {
            let all: Vec<Vec<f32>> = (0..world).map(|r| rank_input(cfg.seed, size, r)).collect();
            oracle(&all)
        });
        let mut buf = input.clone();
        let (mut lat, mut sent, mut last) = (0.0, 0u64, None);
        for op in 0..cfg.warmup + cfg.iters {
            if rank == 0 {
                pending.retain(|f| {
                    let due = start.elapsed() >= f.after;
                    if due {
                        comm.connections().close_rail(f.rail);
                    }
                    !due
                });
            }
            buf.copy_from_slice(&input);
            let before = bytes_sent(comm.connections());
            let rep = comm.allreduce(&mut buf)?;
            if op == 0 {
                if let Some((sum, mag)) = &check {
                    let err = relative_error(&buf, sum, mag);
                    if err > SUM_TOLERANCE {
                        bail!("rank {rank}: size {size} result off by {err:e}");
                    }
                }
            }
            if op >= cfg.warmup {
                lat += op_latency(&comm, ccfg.clock, &rep);
                sent += bytes_sent(comm.connections()) - before;
                last = Some(rep.allocation);
            }
        }
        let alloc = last.expect("at least one measured op");
        let latency_us = lat / cfg.iters as f64;
        out.push(BenchRecord {
            scenario: cfg.scenario.clone(),
            scheduler: cfg.scheduler.label(),
            algorithm: cfg.algorithm.to_string(),
            nodes: world,
            rails: rail_ids.iter().map(|r| r.0.to_string()).collect::<Vec<_>>().join("+"),
            size,
            latency_us,
            throughput_bps: BenchRecord::throughput(size, latency_us),
            alpha: BenchRecord::alpha_string(&alloc.alpha),
            state: if alloc.hot { "hot" } else { "cold" }.into(),
            bytes_sent: sent / cfg.iters as u64,
        });
    }
    if rank == 0 {
        if let Some(p) = &cfg.balancer_state {
            comm.balancer().table().save(p).with_context(|| format!("saving {}", p.display()))?;
        }
    }
    // Keep peers' channels open until everyone is done.
    comm.sync()?;
    Ok(out)
}

/// Builds every rank's connections inside this process. TCP transports
/// rendezvous over loopback through an in-memory store.
pub fn connect_all(world: usize, rails: &[RailProfile], transport: Transport) -> Result<Vec<ConnectionSet>> {
    let opts = MeshOptions { shaped: transport.shaped(), ..MeshOptions::default() };
    if transport.in_process() {
        return Ok(memory_mesh(world, rails, &opts)?);
    }
    let store = MemoryStore::new();
    let sets = std::thread::scope(|s| {
        let hs: Vec<_> = (0..world)
            .map(|rank| {
                let (store, opts) = (&store, &opts);
                s.spawn(move || rendezvous(store as &dyn RendezvousStore, rank, world, rails, opts))
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("rendezvous thread")).collect::<nezha::Result<Vec<_>>>()
    })?;
    Ok(sets)
}

/// Runs every rank as a thread of this process; returns rank 0's rows.
pub fn run_threads(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let sets = connect_all(cfg.world_size, &cfg.rails, cfg.transport)?;
    let results: Vec<Result<Vec<BenchRecord>>> = std::thread::scope(|s| {
        let hs: Vec<_> = sets.into_iter().map(|c| s.spawn(move || run_rank(c, cfg))).collect();
        hs.into_iter().map(|h| h.join().expect("rank thread")).collect()
    });
    let mut rows = None;
    for (rank, r) in results.into_iter().enumerate() {
        let r = r.with_context(|| format!("rank {rank}"))?;
        if rank == 0 {
            rows = Some(r);
        }
    }
    Ok(rows.expect("rank 0 ran"))
}

/// Runs one rank of a multi-process launch, meeting peers through `store`.
pub fn run_process(cfg: &BenchConfig, rank: usize, store: &dyn RendezvousStore) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    if cfg.transport.in_process() {
        bail!("in-memory transports run all ranks in one process; drop --rank");
    }
    let opts = MeshOptions { shaped: cfg.transport.shaped(), timeout: Duration::from_secs(60), ..MeshOptions::default() };
    let conns = rendezvous(store, rank, cfg.world_size, &cfg.rails, &opts).context("rendezvous failed")?;
    run_rank(conns, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_reproducible_and_distinct() {
        assert_eq!(rank_input(3, 4096, 1), rank_input(3, 4096, 1));
        assert_ne!(rank_input(3, 4096, 1), rank_input(3, 4096, 0));
        assert_eq!(rank_input(0, 2, 0).len(), 1);
    }

    #[test]
    fn error_is_relative_to_magnitudes() {
        let (s, m) = oracle(&[vec![1.0, 1e6], vec![-1.0, 1.0]]);
        assert_eq!(s, vec![0.0, 1e6 + 1.0]);
        assert!(relative_error(&[1e-7, 1e6 + 1.0], &s, &m) < 1e-6);
    }
}
