//! Reference setups used by the benchmark presets and acceptance tests.

use super::calibrate::{calibrate, CalibratedProfile};
use super::engine::{Penalty, SimParams};
use super::sched::{simulate_allreduce, single_rail_latencies, Scheduler};
use crate::balancer::SyncModel;
use crate::collective::Algorithm;
use crate::error::Result;
use crate::types::{ProtocolKind, RailId, RailProfile};

pub const TABLE1_NODES: usize = 4;
pub const TABLE1_SIZES: [u64; 3] = [1 << 10, 8 << 20, 64 << 20];

/// Published 4-node latencies in µs, one row per size in [`TABLE1_SIZES`]:
/// SHARP, TCP, 50/50, 99% TCP, 99% SHARP, sliced.
pub const TABLE1: [[f64; 6]; 3] = [
    [9.0, 982.0, 987.0, 984.0, 991.0, 1002.0],
    [22140.0, 37137.0, 21265.0, 37141.0, 23911.0, 31013.0],
    [181484.0, 316323.0, 178373.0, 314913.0, 188137.0, 257135.0],
];

pub const TABLE1_COLUMNS: [&str; 6] = ["sharp", "tcp", "split-1/1", "split-99/1", "split-1/99", "slice"];

/// TCP is rail 0, SHARP rail 1.
pub const TCP: RailId = RailId(0);
pub const SHARP: RailId = RailId(1);

pub fn table1_calibration() -> Result<Vec<CalibratedProfile>> {
    let col = |c: usize| -> Vec<(u64, f64)> { TABLE1_SIZES.iter().zip(TABLE1.iter()).map(|(s, row)| (*s, row[c])).collect() };
    Ok(vec![
        calibrate(TCP.0, ProtocolKind::Tcp, &col(1), TABLE1_NODES)?,
        calibrate(SHARP.0, ProtocolKind::Sharp, &col(0), TABLE1_NODES)?,
    ])
}

pub fn table1_rails() -> Result<Vec<RailProfile>> {
    Ok(table1_calibration()?.into_iter().map(|c| c.profile).collect())
}

/// Cross-rail coordination cost fitted to the split columns.
pub fn table1_sync() -> SyncModel {
    SyncModel { fixed_us: 0.0, saturating_us: 696.0, half_bytes: 65536.0, staging_bps: 1e6 / 2.98e-5 }
}

pub fn table1_params() -> SimParams {
    SimParams { sync: table1_sync(), ..SimParams::new(TABLE1_NODES) }
}

/// The six columns of one Table 1 row as simulated.
pub fn table1_row(rails: &[RailProfile], params: &SimParams, bytes: u64) -> Result<[f64; 6]> {
    let single = single_rail_latencies(rails, params, bytes);
    let fixed = |a: f64| -> Result<f64> { Ok(simulate_allreduce(rails, &Scheduler::fixed(vec![a, 1.0 - a]), params, bytes, 1, 0)?.latency_us) };
    Ok([
        single[SHARP.0 as usize],
        single[TCP.0 as usize],
        fixed(0.5)?,
        fixed(0.99)?,
        fixed(0.01)?,
        simulate_allreduce(rails, &Scheduler::slice(), params, bytes, 1, 0)?.latency_us,
    ])
}

/// Index pairs `(i, j)` with `i < j` over the six Table 1 columns.
pub fn column_pairs() -> impl Iterator<Item = (usize, usize)> {
    (0..6).flat_map(|i| (i + 1..6).map(move |j| (i, j)))
}

pub const GPT_SIM_BYTES: u64 = 256 << 20;
pub const GPT_SIM_NODES: [usize; 4] = [16, 32, 64, 128];

/// Two identical shaped-TCP rails for the large-scale simulation.
pub fn gpt_sim_rails() -> Vec<RailProfile> {
    (0..2).map(|i| RailProfile::new(i, ProtocolKind::Tcp, 30.0, 1.25e9).expect("valid profile")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GptSimPoint {
    pub nodes: usize,
    pub algorithm: Algorithm,
    pub single_us: f64,
    pub dual_us: f64,
}

impl GptSimPoint {
    /// Dual-rail over single-rail throughput.
    pub fn ratio(&self) -> f64 {
        self.single_us / self.dual_us
    }
}

/// Single-rail vs balanced dual-rail latency for one gradient exchange.
pub fn gpt_sim(nodes: usize, algorithm: Algorithm, penalty: bool) -> Result<GptSimPoint> {
    let rails = gpt_sim_rails();
    let params = SimParams {
        algorithm,
        sync: SyncModel::constant(50.0),
        penalty: if penalty { Penalty::on() } else { Penalty::default() },
        ..SimParams::new(nodes)
    };
    let single = single_rail_latencies(&rails[..1], &params, GPT_SIM_BYTES)[0];
    let dual = simulate_allreduce(&rails, &Scheduler::Nezha, &params, GPT_SIM_BYTES, 1, 0)?.latency_us;
    Ok(GptSimPoint { nodes, algorithm, single_us: single, dual_us: dual })
}
