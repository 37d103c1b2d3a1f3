//! Allreduce benchmark harness: size sweeps over live transports, CSV
//! output, and simulated presets.

pub mod config;
pub mod live;
pub mod presets;
pub mod record;

pub use config::{BenchConfig, FailSpec, Transport};
pub use live::{connect_all, run_process, run_rank, run_threads};
pub use presets::{run_preset, Preset};
pub use record::{write_csv, BenchRecord, HEADER};
