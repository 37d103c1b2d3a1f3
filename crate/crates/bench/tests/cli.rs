use std::process::Command;

use nezha::RailId;
use nezha_bench::{run_threads, BenchConfig, FailSpec, Transport, HEADER};

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nezha-bench"))
}

fn inmem(args: &[&str]) -> std::process::Output {
    bench().args(["--transport", "inmem", "--ranks", "2", "--warmup", "2"]).args(args).output().unwrap()
}

#[test]
fn smoke_run_prints_one_row_per_size() {
    let out = inmem(&["--sizes", "1KB", "--iters", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], HEADER.join(","));
    let cols: Vec<_> = lines[1].split(',').collect();
    assert_eq!(cols.len(), HEADER.len());
    assert_eq!(cols[5], "1024");
}

#[test]
fn same_seed_gives_identical_csv() {
    let args = ["--sizes", "4KB,64KB", "--iters", "4", "--seed", "7"];
    let a = inmem(&args);
    let b = inmem(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let out = bench().args(["--preset", "no-such-thing"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("table1"), "{err}");
}

#[test]
fn slice_is_rejected_for_live_runs() {
    let out = inmem(&["--sizes", "1KB", "--iters", "1", "--scheduler", "slice"]);
    assert!(!out.status.success());
}

#[test]
fn presets_write_csv_and_plot_script() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["table1", "gpt-sim"] {
        let csv = dir.path().join(format!("{preset}.csv"));
        let out = bench().args(["--preset", preset, "--output"]).arg(&csv).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let body = std::fs::read_to_string(&csv).unwrap();
        assert!(body.lines().count() > 1);
        let plot = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .any(|e| e.file_name().to_string_lossy().starts_with(preset) && e.file_name().to_string_lossy().ends_with(".py"));
        assert!(plot, "no plot script for {preset}");
    }
}

fn small(transport: Transport) -> BenchConfig {
    BenchConfig {
        world_size: 2,
        sizes: vec![64 << 10],
        iters: 20,
        warmup: 2,
        transport,
        ..BenchConfig::default()
    }
}

#[test]
fn failed_rail_leaves_the_survivor_carrying_everything() {
    let cfg = BenchConfig { failures: vec![FailSpec { rail: RailId(0), after: std::time::Duration::ZERO }], ..small(Transport::Tcp) };
    let rows = run_threads(&cfg).unwrap();
    let alpha = rows[0].alpha_values();
    assert_eq!(alpha[0], 0.0, "{alpha:?}");
    assert!((alpha[1] - 1.0).abs() < 1e-9, "{alpha:?}");
}

#[test]
fn balancer_state_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    let cfg = BenchConfig { balancer_state: Some(state.clone()), iters: 200, ..small(Transport::Inmem) };
    let first = run_threads(&cfg).unwrap();
    assert!(state.exists());
    let second = run_threads(&BenchConfig { iters: 1, warmup: 0, ..cfg }).unwrap();
    assert_eq!(first[0].state, second[0].state);
    assert_eq!(first[0].alpha, second[0].alpha);
}
