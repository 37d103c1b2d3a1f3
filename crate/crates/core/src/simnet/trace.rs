use serde::{Deserialize, Serialize};

use super::engine::{EventKind, SimParams};
use super::sched::SimBench;
use crate::balancer::{Balancer, BalancerConfig};
use crate::error::{Error, Result};
use crate::types::{RailId, RailProfile};

/// A rail that is down from `start_s` until `end_s`, then readmitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub rail: RailId,
    pub start_s: f64,
    pub end_s: f64,
}

/// Operations are issued every `period_us`; one that overruns delays the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub bytes: u64,
    pub period_us: f64,
    pub duration_s: f64,
    pub sample_s: f64,
    #[serde(default)]
    pub outages: Vec<Outage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceSample {
    pub t_s: f64,
    pub rail: RailId,
    pub throughput_bps: f64,
    pub alpha: f64,
    pub active: bool,
}

/// Per-rail throughput over time under the production balancer, with
/// rails dropped and readmitted per `cfg.outages`.
pub fn simulate_failure_trace(profiles: &[RailProfile], params: &SimParams, cfg: &TraceConfig, seed: u64) -> Result<Vec<TraceSample>> {
    if !(cfg.period_us > 0.0 && cfg.duration_s > 0.0 && cfg.sample_s > 0.0) {
        return Err(Error::invalid("trace period, duration and sample interval must be positive"));
    }
    for o in &cfg.outages {
        if !profiles.iter().any(|p| p.rail_id == o.rail) {
            return Err(Error::UnknownRail(o.rail));
        }
        if !(o.end_s > o.start_s) {
            return Err(Error::invalid(format!("outage on rail {} ends before it starts", o.rail.0)));
        }
    }
    let mut bench = SimBench::new(profiles, params.clone(), seed);
    let bcfg = BalancerConfig { sync: params.sync, ..Default::default() };
    let mut balancer = Balancer::new(Box::new(bench.model()), bcfg)?;
    let end_us = cfg.duration_s * 1e6;
    let sample_us = cfg.sample_s * 1e6;
    let windows = (end_us / sample_us).ceil() as usize;
    let mut carried = vec![vec![0u64; profiles.len()]; windows];
    let mut alpha_at = vec![vec![0.0; profiles.len()]; windows];
    let mut active_at = vec![vec![true; profiles.len()]; windows];

    let mut issue = 0.0;
    while issue < end_us {
        let t_s = issue / 1e6;
        for (i, p) in profiles.iter().enumerate() {
            let down = cfg.outages.iter().any(|o| o.rail == p.rail_id && t_s >= o.start_s && t_s < o.end_s);
            if balancer.is_active(p.rail_id) == down {
                balancer.set_active(p.rail_id, !down)?;
                bench.simulator().mark(if down { EventKind::Fail } else { EventKind::Flush }, p.rail_id);
            }
            let w = ((issue / sample_us) as usize).min(windows - 1);
            active_at[w][i] = !down;
        }
        let alloc = balancer.allocate(cfg.bytes);
        let per: Vec<u64> = profiles.iter().map(|p| alloc.segment_of(p.rail_id).map_or(0, |s| s.len)).collect();
        let now = bench.simulator().now();
        bench.simulator().advance_to(now.max(issue));
        let t = bench.run(&per);
        if !balancer.degraded() {
            balancer.observe(&alloc, &t.per_rail_us)?;
        }
        let w = ((issue / sample_us) as usize).min(windows - 1);
        for (i, b) in per.iter().enumerate() {
            carried[w][i] += b;
        }
        alpha_at[w] = alloc.alpha.clone();
        issue = (issue + cfg.period_us).max(bench.simulator().now());
    }

    let mut out = Vec::with_capacity(windows * profiles.len());
    for w in 0..windows {
        let len_s = (sample_us.min(end_us - w as f64 * sample_us)) / 1e6;
        for (i, p) in profiles.iter().enumerate() {
            out.push(TraceSample {
                t_s: w as f64 * cfg.sample_s,
                rail: p.rail_id,
                throughput_bps: carried[w][i] as f64 / len_s,
                alpha: alpha_at[w][i],
                active: active_at[w][i],
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ProtocolKind;

    #[test]
    fn survivor_absorbs_the_load_and_split_returns() {
        let rails = vec![
            RailProfile::new(0, ProtocolKind::Tcp, 50.0, 1e9).unwrap(),
            RailProfile::new(1, ProtocolKind::Tcp, 50.0, 1e9).unwrap(),
        ];
        let cfg = TraceConfig {
            bytes: 8 << 20,
            period_us: 40_000.0,
            duration_s: 30.0,
            sample_s: 1.0,
            outages: vec![Outage { rail: RailId(1), start_s: 10.0, end_s: 20.0 }],
        };
        let s = simulate_failure_trace(&rails, &SimParams::new(4), &cfg, 0).unwrap();
        let at = |t: f64, r: u16| s.iter().find(|x| x.t_s == t && x.rail == RailId(r)).unwrap();
        let before = at(5.0, 0).throughput_bps;
        assert!((at(5.0, 1).throughput_bps - before).abs() / before < 0.01);
        assert_eq!(at(15.0, 1).throughput_bps, 0.0);
        assert!((at(15.0, 0).throughput_bps / before - 2.0).abs() < 0.01);
        assert_eq!(at(25.0, 1).alpha, at(5.0, 1).alpha);
    }
}
