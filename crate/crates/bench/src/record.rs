use std::io::Write;

use anyhow::Result;
use serde::Serialize;

pub const HEADER: [&str; 11] = [
    "scenario",
    "scheduler",
    "algorithm",
    "nodes",
    "rails",
    "size",
    "latency_us",
    "throughput_bps",
    "alpha",
    "state",
    "bytes_sent",
];

/// One CSV row: a size under one scheduler on one rail set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub scenario: String,
    pub scheduler: String,
    pub algorithm: String,
    pub nodes: usize,
    /// Rail ids joined by `+`.
    pub rails: String,
    pub size: u64,
    pub latency_us: f64,
    pub throughput_bps: f64,
    /// Per-rail shares joined by `;`.
    pub alpha: String,
    /// `cold` or `hot`.
    pub state: String,
    /// DATA bytes this rank sent per operation, summed over rails.
    pub bytes_sent: u64,
}

impl BenchRecord {
    pub fn alpha_string(alpha: &[f64]) -> String {
        alpha.iter().map(|a| format!("{a:.6}")).collect::<Vec<_>>().join(";")
    }

    pub fn alpha_values(&self) -> Vec<f64> {
        self.alpha.split(';').filter_map(|a| a.parse().ok()).collect()
    }

    pub fn throughput(size: u64, latency_us: f64) -> f64 {
        if latency_us > 0.0 {
            size as f64 / (latency_us * 1e-6)
        } else {
            0.0
        }
    }
}

pub fn write_csv<W: Write>(out: W, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
