use std::path::Path;

use serde::{Deserialize, Serialize};

use super::calibrate::calibrate;
use super::engine::{Penalty, SimParams};
use super::sched::{simulate_allreduce, Scheduler};
use super::trace::{simulate_failure_trace, Outage, TraceConfig, TraceSample};
use crate::balancer::SyncModel;
use crate::collective::Algorithm;
use crate::error::{Error, Result};
use crate::types::{ProtocolKind, RailProfile};

/// Parses `1024`, `2KB`, `8MB`, `1GB` (binary multiples).
pub fn parse_size(s: &str) -> Result<u64> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().map_err(|_| Error::invalid(format!("bad size {s:?}")))?;
    let mult = match unit.trim().to_ascii_uppercase().as_str() {
        "" | "B" => 1,
        "K" | "KB" | "KIB" => 1 << 10,
        "M" | "MB" | "MIB" => 1 << 20,
        "G" | "GB" | "GIB" => 1 << 30,
        _ => return Err(Error::invalid(format!("bad size unit in {s:?}"))),
    };
    n.checked_mul(mult).filter(|v| *v > 0).ok_or_else(|| Error::invalid(format!("size {s:?} out of range")))
}

/// Parses `lo:hi` into the powers of two from `lo` to `hi`, or a
/// comma-separated list of sizes.
pub fn parse_sizes(s: &str) -> Result<Vec<u64>> {
    if let Some((lo, hi)) = s.split_once(':') {
        let (lo, hi) = (parse_size(lo)?, parse_size(hi)?);
        if lo > hi {
            return Err(Error::invalid(format!("empty size range {s:?}")));
        }
        let mut out = vec![];
        let mut v = lo;
        while v <= hi {
            out.push(v);
            v = v.checked_mul(2).ok_or_else(|| Error::invalid("size range overflows"))?;
        }
        return Ok(out);
    }
    s.split(',').map(parse_size).collect()
}

/// A size written either as a byte count or as a string like `"8MB"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SizeSpec {
    Bytes(u64),
    Text(String),
}

impl SizeSpec {
    pub fn bytes(&self) -> Result<u64> {
        match self {
            SizeSpec::Bytes(0) => Err(Error::invalid("size must be positive")),
            SizeSpec::Bytes(b) => Ok(*b),
            SizeSpec::Text(t) => parse_size(t),
        }
    }
}

/// One rail in a rails file or scenario: either explicit `(t_setup, B)` or
/// calibration samples of whole-allreduce latency on `calibration_nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RailSpec {
    pub protocol: ProtocolKind,
    #[serde(default)]
    pub t_setup_us: Option<f64>,
    #[serde(default)]
    pub bandwidth_bps: Option<f64>,
    #[serde(default)]
    pub calibration: Vec<(u64, f64)>,
    #[serde(default = "four")]
    pub calibration_nodes: usize,
    #[serde(default)]
    pub max_frame_payload: Option<usize>,
}

fn four() -> usize {
    4
}

impl RailSpec {
    pub fn profile(&self, rail_id: u16) -> Result<RailProfile> {
        let p = if !self.calibration.is_empty() {
            calibrate(rail_id, self.protocol, &self.calibration, self.calibration_nodes)?.profile
        } else {
            match (self.t_setup_us, self.bandwidth_bps) {
                (Some(t), Some(b)) => RailProfile::new(rail_id, self.protocol, t, b)?,
                _ => {
                    return Err(Error::InvalidProfile(format!(
                        "rail {rail_id}: needs t_setup_us and bandwidth_bps, or calibration samples"
                    )))
                }
            }
        };
        match self.max_frame_payload {
            Some(m) => p.with_max_frame(m),
            None => Ok(p),
        }
    }
}

/// The rails file shared by the simulator and the benchmark harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RailsFile {
    pub rails: Vec<RailSpec>,
}

impl RailsFile {
    pub fn parse(text: &str) -> Result<Self> {
        let f: RailsFile = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        if f.rails.is_empty() {
            return Err(Error::Scenario("no rails configured".into()));
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn profiles(&self) -> Result<Vec<RailProfile>> {
        self.rails.iter().enumerate().map(|(i, r)| r.profile(i as u16)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "four")]
    pub nodes: usize,
    pub sizes: Vec<SizeSpec>,
    #[serde(default = "nezha_only")]
    pub schedulers: Vec<Scheduler>,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub chunk_bytes: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_iter")]
    pub iters: usize,
    #[serde(default)]
    pub sync: SyncModel,
    #[serde(default)]
    pub penalty: Penalty,
    #[serde(default)]
    pub jitter: f64,
    pub rails: Vec<RailSpec>,
    #[serde(default)]
    pub outages: Vec<Outage>,
    #[serde(default)]
    pub trace: Option<TraceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub bytes: SizeSpec,
    pub period_us: f64,
    pub duration_s: f64,
    #[serde(default = "one_second")]
    pub sample_s: f64,
}

fn nezha_only() -> Vec<Scheduler> {
    vec![Scheduler::Nezha]
}

fn one_iter() -> usize {
    1
}

fn one_second() -> f64 {
    1.0
}

/// One simulated `(size, scheduler)` result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRow {
    pub scenario: String,
    pub size: u64,
    pub scheduler: String,
    pub latency_us: f64,
    pub alpha: Vec<f64>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 {
            return Err(Error::Scenario("nodes must be at least 2".into()));
        }
        if self.rails.is_empty() {
            return Err(Error::Scenario("no rails configured".into()));
        }
        if self.iters == 0 {
            return Err(Error::Scenario("iters must be at least 1".into()));
        }
        for s in &self.sizes {
            s.bytes()?;
        }
        Ok(())
    }

    pub fn profiles(&self) -> Result<Vec<RailProfile>> {
        self.rails.iter().enumerate().map(|(i, r)| r.profile(i as u16)).collect()
    }

    pub fn params(&self) -> SimParams {
        SimParams {
            algorithm: self.algorithm,
            chunk_bytes: self.chunk_bytes,
            sync: self.sync,
            penalty: self.penalty,
            jitter: self.jitter,
            ..SimParams::new(self.nodes)
        }
    }

    /// Every size under every scheduler.
    pub fn run(&self) -> Result<Vec<ScenarioRow>> {
        let profiles = self.profiles()?;
        let params = self.params();
        let mut rows = vec![];
        for size in &self.sizes {
            let bytes = size.bytes()?;
            for sched in &self.schedulers {
                let r = simulate_allreduce(&profiles, sched, &params, bytes, self.iters, self.seed)?;
                rows.push(ScenarioRow {
                    scenario: self.name.clone(),
                    size: bytes,
                    scheduler: r.scheduler,
                    latency_us: r.latency_us,
                    alpha: r.alpha,
                });
            }
        }
        Ok(rows)
    }

    /// The failure trace, when the scenario defines one.
    pub fn run_trace(&self) -> Result<Option<Vec<TraceSample>>> {
        let Some(t) = &self.trace else { return Ok(None) };
        let cfg = TraceConfig {
            bytes: t.bytes.bytes()?,
            period_us: t.period_us,
            duration_s: t.duration_s,
            sample_s: t.sample_s,
            outages: self.outages.clone(),
        };
        simulate_failure_trace(&self.profiles()?, &self.params(), &cfg, self.seed).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("2KB").unwrap(), 2048);
        assert_eq!(parse_size("64MB").unwrap(), 64 << 20);
        assert_eq!(parse_size("100").unwrap(), 100);
        assert!(parse_size("0").is_err() && parse_size("3XB").is_err() && parse_size("MB").is_err());
        assert_eq!(parse_sizes("2KB:16KB").unwrap(), vec![2048, 4096, 8192, 16384]);
        assert_eq!(parse_sizes("1KB,8MB").unwrap(), vec![1024, 8 << 20]);
    }

    #[test]
    fn scenario_round_trip() {
        let text = r#"
            name = "demo"
            nodes = 4
            sizes = ["1MB", 4096]
            schedulers = [{ kind = "nezha" }, { kind = "fixed", alpha = [0.5, 0.5] }, { kind = "slice" }]

            [[rails]]
            protocol = "TCP"
            t_setup_us = 20.0
            bandwidth_bps = 1e9

            [[rails]]
            protocol = "SHARP"
            calibration = [[1024, 9.0], [8388608, 22140.0], [67108864, 181484.0]]
        "#;
        let s = Scenario::parse(text).unwrap();
        let rows = s.run().unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| (r.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        assert!(Scenario::parse("name = 'x'\nsizes = []\nrails = []").is_err());
    }
}
