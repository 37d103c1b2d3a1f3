use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use nezha::collective::Algorithm;
use nezha::simnet::{parse_sizes, RailsFile, Scheduler};
use nezha::{ProtocolKind, RailId, RailProfile};

pub const DEFAULT_SIZES: &str = "2KB:64MB";
pub const DEFAULT_ITERS: usize = 10_000;
pub const CI_ITERS: usize = 1_000;
/// Operations run before measuring; the balancer's convergence budget.
pub const WARMUP_OPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Transport {
    /// Loopback TCP paced to each rail profile, one process per rank.
    Shaped,
    /// Loopback TCP without pacing, one process per rank.
    Tcp,
    /// In-process queues; ranks are threads and latencies come from the model.
    Inmem,
    /// In-process queues paced to each rail profile.
    ShapedInmem,
}

impl Transport {
    pub fn in_process(self) -> bool {
        matches!(self, Transport::Inmem | Transport::ShapedInmem)
    }

    pub fn shaped(self) -> bool {
        matches!(self, Transport::Shaped | Transport::ShapedInmem)
    }
}

/// `--fail-rail id@ms`: rank 0 closes the rail this long after the run starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FailSpec {
    pub rail: RailId,
    pub after: Duration,
}

impl FromStr for FailSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (id, ms) = s.split_once('@').with_context(|| format!("expected <rail>@<ms>, got {s:?}"))?;
        Ok(FailSpec {
            rail: RailId(id.trim().parse().with_context(|| format!("bad rail id in {s:?}"))?),
            after: Duration::from_millis(ms.trim().parse().with_context(|| format!("bad time in {s:?}"))?),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub world_size: usize,
    pub sizes: Vec<u64>,
    pub iters: usize,
    pub warmup: usize,
    pub algorithm: Algorithm,
    pub rails: Vec<RailProfile>,
    pub scheduler: Scheduler,
    pub transport: Transport,
    pub seed: u64,
    pub failures: Vec<FailSpec>,
    pub balancer_state: Option<PathBuf>,
    pub scenario: String,
    /// Check every rank's first result of each size against a locally computed sum.
    pub verify: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            world_size: 2,
            sizes: parse_sizes(DEFAULT_SIZES).expect("valid default"),
            iters: DEFAULT_ITERS,
            warmup: WARMUP_OPS,
            algorithm: Algorithm::Ring,
            rails: default_rails(),
            scheduler: Scheduler::Nezha,
            transport: Transport::Inmem,
            seed: 0,
            failures: vec![],
            balancer_state: None,
            scenario: "bench".into(),
            verify: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.world_size < 2 {
            bail!("need at least 2 ranks");
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            bail!("sizes must be positive");
        }
        if self.iters == 0 {
            bail!("iters must be at least 1");
        }
        if self.rails.is_empty() {
            bail!("no rails configured");
        }
        for f in &self.failures {
            if !self.rails.iter().any(|r| r.rail_id == f.rail) {
                bail!("--fail-rail names unknown rail {}", f.rail.0);
            }
        }
        if matches!(self.scheduler, Scheduler::Slice { .. }) {
            bail!("the slice scheduler is only available in simulated presets");
        }
        Ok(())
    }
}

/// Two identical desk-scale TCP rails.
pub fn default_rails() -> Vec<RailProfile> {
    (0..2).map(|i| RailProfile::new(i, ProtocolKind::Tcp, 50.0, 5e8).expect("valid profile")).collect()
}

pub fn load_rails(path: &std::path::Path) -> Result<Vec<RailProfile>> {
    let file = RailsFile::load(path).with_context(|| format!("reading rails config {}", path.display()))?;
    Ok(file.profiles()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fail_spec_parses() {
        let f: FailSpec = "1@250".parse().unwrap();
        assert_eq!(f, FailSpec { rail: RailId(1), after: Duration::from_millis(250) });
        assert!("1".parse::<FailSpec>().is_err());
        assert!("x@3".parse::<FailSpec>().is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(BenchConfig::default().validate().is_ok());
        assert!(BenchConfig { iters: 0, ..Default::default() }.validate().is_err());
        assert!(BenchConfig { world_size: 1, ..Default::default() }.validate().is_err());
        assert!(BenchConfig { scheduler: Scheduler::slice(), ..Default::default() }.validate().is_err());
    }
}
