use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Result};
use nezha::collective::Algorithm;
use nezha::simnet::presets::{
    gpt_sim, table1_params, table1_rails, table1_row, table1_sync, GPT_SIM_BYTES, GPT_SIM_NODES, SHARP,
    TABLE1_COLUMNS, TABLE1_NODES, TABLE1_SIZES, TCP,
};
use nezha::simnet::{
    parse_sizes, simulate_allreduce, simulate_failure_trace, single_rail_latencies, Outage, Scheduler, SimParams,
    TraceConfig, TraceSample,
};
use nezha::{ring_volume, RailId, RailProfile};
use serde::Serialize;

use crate::record::{write_csv, BenchRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Table1,
    SweepHomogeneous,
    SweepHeterogeneous,
    FailoverTrace,
    GptSim,
}

impl Preset {
    pub const ALL: [Preset; 5] =
        [Preset::Table1, Preset::SweepHomogeneous, Preset::SweepHeterogeneous, Preset::FailoverTrace, Preset::GptSim];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::SweepHomogeneous => "sweep-homogeneous",
            Preset::SweepHeterogeneous => "sweep-heterogeneous",
            Preset::FailoverTrace => "failover-trace",
            Preset::GptSim => "gpt-sim",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match Preset::ALL.iter().find(|p| p.name() == s) {
            Some(p) => Ok(*p),
            None => {
                let known: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                bail!("unknown preset {s:?}; expected one of {}", known.join(", "))
            }
        }
    }
}

/// Files a preset wrote.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub csv: PathBuf,
    pub plot: PathBuf,
    pub rows: usize,
}

fn rails_label(rails: &[RailId]) -> String {
    rails.iter().map(|r| r.0.to_string()).collect::<Vec<_>>().join("+")
}

#[allow(clippy::too_many_arguments)]
fn row(
    scenario: &str,
    scheduler: &str,
    algorithm: Algorithm,
    nodes: usize,
    rails: &[RailId],
    size: u64,
    latency_us: f64,
    alpha: &[f64],
) -> BenchRecord {
    let hot = alpha.iter().filter(|a| **a > 0.0).count() > 1;
    BenchRecord {
        scenario: scenario.into(),
        scheduler: scheduler.into(),
        algorithm: algorithm.to_string(),
        nodes,
        rails: rails_label(rails),
        size,
        latency_us,
        throughput_bps: BenchRecord::throughput(size, latency_us),
        alpha: BenchRecord::alpha_string(alpha),
        state: if hot { "hot" } else { "cold" }.into(),
        bytes_sent: alpha.iter().map(|a| ring_volume(nodes, (a * size as f64) as u64).unwrap_or(0)).sum(),
    }
}

/// Simulated Table 1 grid: single rails, three fixed splits and slicing.
pub fn table1() -> Result<Vec<BenchRecord>> {
    let rails = table1_rails()?;
    let params = table1_params();
    let both = [TCP, SHARP];
    let mut out = vec![];
    for s in TABLE1_SIZES {
        let cols = table1_row(&rails, &params, s)?;
        for (c, name) in TABLE1_COLUMNS.iter().enumerate() {
            let (set, alpha): (Vec<RailId>, Vec<f64>) = match c {
                0 => (vec![SHARP], vec![0.0, 1.0]),
                1 => (vec![TCP], vec![1.0, 0.0]),
                5 => {
                    let r = simulate_allreduce(&rails, &Scheduler::slice(), &params, s, 1, 0)?;
                    (both.to_vec(), r.alpha)
                }
                2 => (both.to_vec(), vec![0.5, 0.5]),
                3 => (both.to_vec(), vec![0.99, 0.01]),
                _ => (both.to_vec(), vec![0.01, 0.99]),
            };
            out.push(row("table1", name, Algorithm::Ring, TABLE1_NODES, &set, s, cols[c], &alpha));
        }
    }
    Ok(out)
}

/// Identical dual TCP rails at 4 and 8 nodes: balancer vs one rail.
pub fn sweep_homogeneous() -> Result<Vec<BenchRecord>> {
    let tcp = table1_rails()?[0].clone();
    let rails = vec![tcp.clone(), RailProfile { rail_id: RailId(1), ..tcp }];
    sweep("sweep-homogeneous", &rails, &[4, 8], &[Scheduler::Nezha])
}

/// TCP + SHARP at 4 nodes under every scheduler.
pub fn sweep_heterogeneous() -> Result<Vec<BenchRecord>> {
    sweep(
        "sweep-heterogeneous",
        &table1_rails()?,
        &[TABLE1_NODES],
        &[Scheduler::Nezha, Scheduler::proportional(), Scheduler::slice()],
    )
}

fn sweep(name: &str, rails: &[RailProfile], nodes: &[usize], scheds: &[Scheduler]) -> Result<Vec<BenchRecord>> {
    let ids: Vec<RailId> = rails.iter().map(|r| r.rail_id).collect();
    let mut out = vec![];
    for &n in nodes {
        let params = SimParams { sync: table1_sync(), ..SimParams::new(n) };
        for s in parse_sizes("2KB:64MB")? {
            let single = single_rail_latencies(rails, &params, s);
            for (i, t) in single.iter().enumerate() {
                let mut a = vec![0.0; rails.len()];
                a[i] = 1.0;
                out.push(row(name, &format!("single-{}", ids[i].0), Algorithm::Ring, n, &ids[i..=i], s, *t, &a));
            }
            for sched in scheds {
                let r = simulate_allreduce(rails, sched, &params, s, 1, 0)?;
                out.push(row(name, &r.scheduler, Algorithm::Ring, n, &ids, s, r.latency_us, &r.alpha));
            }
        }
    }
    Ok(out)
}

pub const TRACE_HEADER: [&str; 5] = ["t_s", "rail", "throughput_bps", "alpha", "active"];

#[derive(Debug, Clone, Serialize)]
struct TraceRow {
    t_s: f64,
    rail: u16,
    throughput_bps: f64,
    alpha: f64,
    active: bool,
}

/// Symmetric dual rail with two outage windows, sampled every second.
pub fn failover_trace() -> Result<Vec<TraceSample>> {
    let rails: Vec<RailProfile> =
        (0..2).map(|i| RailProfile::new(i, nezha::ProtocolKind::Tcp, 50.0, 1.25e9).expect("valid profile")).collect();
    let cfg = TraceConfig {
        bytes: 32 << 20,
        period_us: 80_000.0,
        duration_s: 300.0,
        sample_s: 1.0,
        outages: vec![
            Outage { rail: RailId(0), start_s: 60.0, end_s: 120.0 },
            Outage { rail: RailId(1), start_s: 180.0, end_s: 240.0 },
        ],
    };
    Ok(simulate_failure_trace(&rails, &SimParams::new(4), &cfg, 0)?)
}

/// Large-scale simulation: single vs balanced dual rail, penalty off and on.
pub fn gpt_sim_rows() -> Result<Vec<BenchRecord>> {
    let mut out = vec![];
    for penalty in [false, true] {
        let scenario = if penalty { "gpt-sim-penalty" } else { "gpt-sim" };
        for algo in [Algorithm::Ring, Algorithm::RingChunked] {
            for n in GPT_SIM_NODES {
                let p = gpt_sim(n, algo, penalty)?;
                out.push(row(scenario, "single-0", algo, n, &[RailId(0)], GPT_SIM_BYTES, p.single_us, &[1.0, 0.0]));
                out.push(row(scenario, "nezha", algo, n, &[RailId(0), RailId(1)], GPT_SIM_BYTES, p.dual_us, &[0.5, 0.5]));
            }
        }
    }
    Ok(out)
}

pub fn plot_path(csv: &Path) -> PathBuf {
    csv.with_extension("plot.py")
}

/// Runs `preset`, writing its CSV to `csv` and a matplotlib script beside it.
pub fn run_preset(preset: Preset, csv: &Path) -> Result<Artifacts> {
    let file = std::fs::File::create(csv)?;
    let rows = match preset {
        Preset::FailoverTrace => {
            let samples = failover_trace()?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record(TRACE_HEADER)?;
            for s in &samples {
                w.serialize(TraceRow { t_s: s.t_s, rail: s.rail.0, throughput_bps: s.throughput_bps, alpha: s.alpha, active: s.active })?;
            }
            w.flush()?;
            samples.len()
        }
        _ => {
            let rows = match preset {
                Preset::Table1 => table1()?,
                Preset::SweepHomogeneous => sweep_homogeneous()?,
                Preset::SweepHeterogeneous => sweep_heterogeneous()?,
                Preset::GptSim => gpt_sim_rows()?,
                Preset::FailoverTrace => unreachable!(),
            };
            write_csv(file, &rows)?;
            rows.len()
        }
    };
    let plot = plot_path(csv);
    let name = csv.file_name().and_then(|n| n.to_str()).unwrap_or("out.csv");
    std::fs::write(&plot, plot_script(preset, name))?;
    Ok(Artifacts { csv: csv.to_path_buf(), plot, rows })
}

fn plot_script(preset: Preset, csv_name: &str) -> String {
    let body = match preset {
        Preset::Table1 => TABLE1_PLOT,
        Preset::SweepHomogeneous | Preset::SweepHeterogeneous => SWEEP_PLOT,
        Preset::FailoverTrace => TRACE_PLOT,
        Preset::GptSim => GPT_PLOT,
    };
    format!(
        "import os, sys\nimport pandas as pd\nimport matplotlib\nmatplotlib.use(\"Agg\")\nimport matplotlib.pyplot as plt\n\n\
         here = os.path.dirname(os.path.abspath(__file__))\ncsv = sys.argv[1] if len(sys.argv) > 1 else os.path.join(here, \"{csv_name}\")\n\
         df = pd.read_csv(csv)\nout = os.path.splitext(csv)[0] + \".png\"\n\n{body}\nplt.tight_layout()\nplt.savefig(out, dpi=150)\nprint(out)\n"
    )
}

const TABLE1_PLOT: &str = r#"sizes = sorted(df["size"].unique())
fig, axes = plt.subplots(1, len(sizes), figsize=(4 * len(sizes), 3.5))
for ax, s in zip(axes, sizes):
    sub = df[df["size"] == s]
    ax.bar(sub["scheduler"], sub["latency_us"])
    ax.set_title(f"{s} B")
    ax.set_ylabel("latency (us)")
    ax.tick_params(axis="x", rotation=45)
"#;

const SWEEP_PLOT: &str = r#"groups = list(df.groupby("nodes"))
fig, axes = plt.subplots(1, len(groups), figsize=(6 * len(groups), 4), squeeze=False)
for ax, (n, sub) in zip(axes[0], groups):
    for sched, g in sub.groupby("scheduler"):
        ax.plot(g["size"], g["throughput_bps"] / 1e6, marker="o", label=sched)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("payload (B)")
    ax.set_ylabel("throughput (MB/s)")
    ax.set_title(f"{n} nodes")
    ax.legend()
"#;

const TRACE_PLOT: &str = r#"fig, ax = plt.subplots(figsize=(8, 3.5))
for rail, g in df.groupby("rail"):
    ax.plot(g["t_s"], g["throughput_bps"] / 1e3, label=f"rail {rail}")
ax.set_xlabel("time (s)")
ax.set_ylabel("throughput (KB/s)")
ax.legend()
"#;

const GPT_PLOT: &str = r#"fig, ax = plt.subplots(figsize=(6, 4))
for (scenario, algo), g in df.groupby(["scenario", "algorithm"]):
    single = g[g["scheduler"] == "single-0"].set_index("nodes")["latency_us"]
    dual = g[g["scheduler"] == "nezha"].set_index("nodes")["latency_us"]
    ax.plot(single.index, single / dual, marker="o", label=f"{scenario} {algo}")
ax.axhline(2.0, color="grey", linestyle="--")
ax.set_xscale("log", base=2)
ax.set_xlabel("nodes")
ax.set_ylabel("dual / single throughput")
ax.legend()
"#;
