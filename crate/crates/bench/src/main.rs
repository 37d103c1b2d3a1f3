use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::Parser;
use nezha::collective::Algorithm;
use nezha::simnet::{parse_sizes, Scenario, Scheduler};
use nezha::transport::{rendezvous::RENDEZVOUS_DIR_ENV, FileStore};
use nezha::ring_volume;
use nezha_bench::config::{default_rails, load_rails, CI_ITERS, DEFAULT_ITERS, DEFAULT_SIZES, WARMUP_OPS};
use nezha_bench::{run_preset, run_process, run_threads, write_csv, BenchConfig, BenchRecord, FailSpec, Preset, Transport};
use tracing_subscriber::EnvFilter;

/// Repeated allreduce benchmark over one or more rails.
#[derive(Debug, Parser)]
#[command(name = "nezha-bench", version)]
struct Args {
    /// Number of ranks.
    #[arg(long, default_value_t = 2)]
    ranks: usize,
    /// Run only this rank (multi-process launches); omit to launch all ranks.
    #[arg(long)]
    rank: Option<usize>,
    /// Powers of two `lo:hi`, or a comma-separated list.
    #[arg(long, default_value = DEFAULT_SIZES)]
    sizes: String,
    /// Measured operations per size.
    #[arg(long)]
    iters: Option<usize>,
    /// Use the shorter CI iteration count.
    #[arg(long)]
    ci: bool,
    /// Operations per size run before measuring.
    #[arg(long, default_value_t = WARMUP_OPS)]
    warmup: usize,
    /// Rails config (TOML).
    #[arg(long)]
    rails: Option<PathBuf>,
    #[arg(long, default_value = "ring")]
    algorithm: Algorithm,
    /// nezha, fixed, or slice (simulated presets only).
    #[arg(long, default_value = "nezha")]
    scheduler: Scheduler,
    #[arg(long, value_enum, default_value_t = Transport::Inmem)]
    transport: Transport,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Allocation table to load before and save after the run.
    #[arg(long)]
    balancer_state: Option<PathBuf>,
    /// Close rail `id` this many milliseconds into the run (`id@ms`).
    #[arg(long = "fail-rail")]
    fail_rail: Vec<FailSpec>,
    /// Run a named preset instead of a live sweep.
    #[arg(long)]
    preset: Option<Preset>,
    /// Run a simulator scenario file instead of a live sweep.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_env_filter(EnvFilter::from_default_env()).with_writer(std::io::stderr).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nezha-bench: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: Args) -> Result<()> {
    if let Some(preset) = args.preset {
        let out = args.output.clone().unwrap_or_else(|| PathBuf::from(format!("{preset}.csv")));
        let a = run_preset(preset, &out)?;
        eprintln!("{preset}: {} rows -> {}, plot script {}", a.rows, a.csv.display(), a.plot.display());
        return Ok(());
    }
    if let Some(path) = &args.scenario {
        let sc = Scenario::load(path).with_context(|| format!("reading scenario {}", path.display()))?;
        let rows: Vec<BenchRecord> = sc
            .run()?
            .into_iter()
            .map(|r| {
                let used: Vec<String> =
                    r.alpha.iter().enumerate().filter(|(_, a)| **a > 0.0).map(|(i, _)| i.to_string()).collect();
                BenchRecord {
                    scenario: r.scenario,
                    scheduler: r.scheduler,
                    algorithm: sc.algorithm.to_string(),
                    nodes: sc.nodes,
                    rails: used.join("+"),
                    size: r.size,
                    latency_us: r.latency_us,
                    throughput_bps: BenchRecord::throughput(r.size, r.latency_us),
                    state: if used.len() > 1 { "hot" } else { "cold" }.into(),
                    bytes_sent: r.alpha.iter().map(|a| ring_volume(sc.nodes, (a * r.size as f64) as u64).unwrap_or(0)).sum(),
                    alpha: BenchRecord::alpha_string(&r.alpha),
                }
            })
            .collect();
        return emit(args.output.as_ref(), &rows);
    }

    let cfg = BenchConfig {
        world_size: args.ranks,
        sizes: parse_sizes(&args.sizes)?,
        iters: args.iters.unwrap_or(if args.ci { CI_ITERS } else { DEFAULT_ITERS }),
        warmup: args.warmup,
        algorithm: args.algorithm,
        rails: match &args.rails {
            Some(p) => load_rails(p)?,
            None => default_rails(),
        },
        scheduler: args.scheduler.clone(),
        transport: args.transport,
        seed: args.seed,
        failures: args.fail_rail.clone(),
        balancer_state: args.balancer_state.clone(),
        scenario: "bench".into(),
        verify: true,
    };
    cfg.validate()?;

    if cfg.transport.in_process() {
        if args.rank.is_some() {
            bail!("--rank is only meaningful with the tcp or shaped transports");
        }
        let rows = run_threads(&cfg)?;
        return emit(args.output.as_ref(), &rows);
    }
    match args.rank {
        Some(rank) => {
            let dir = std::env::var_os(RENDEZVOUS_DIR_ENV)
                .with_context(|| format!("{RENDEZVOUS_DIR_ENV} must be set when --rank is given"))?;
            let store = FileStore::new(PathBuf::from(dir))?;
            let rows = run_process(&cfg, rank, &store)?;
            if rank == 0 {
                emit(args.output.as_ref(), &rows)?;
            }
            Ok(())
        }
        None => launch(cfg.world_size),
    }
}

/// Re-runs this binary once per rank with `--rank i` and a shared
/// rendezvous directory.
fn launch(world: usize) -> Result<()> {
    let exe = std::env::current_exe()?;
    let base = std::env::var_os(RENDEZVOUS_DIR_ENV).map_or_else(std::env::temp_dir, PathBuf::from);
    let dir = base.join(format!("nezha-rendezvous-{}", std::process::id()));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut children = Vec::with_capacity(world);
    for rank in 0..world {
        let child = Command::new(&exe)
            .args(&args)
            .arg("--rank")
            .arg(rank.to_string())
            .env(RENDEZVOUS_DIR_ENV, &dir)
            .spawn()
            .with_context(|| format!("spawning rank {rank}"))?;
        children.push(child);
    }
    let mut failed = vec![];
    for (rank, mut c) in children.into_iter().enumerate() {
        if !c.wait()?.success() {
            failed.push(rank);
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    if !failed.is_empty() {
        bail!("ranks {failed:?} failed");
    }
    Ok(())
}

fn emit(path: Option<&PathBuf>, rows: &[BenchRecord]) -> Result<()> {
    match path {
        Some(p) => write_csv(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?, rows),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_csv(&mut lock, rows)?;
            lock.flush()?;
            Ok(())
        }
    }
}
