//! Virtual-time simulator that runs the production balancer over modelled
//! rails, for large node counts and calibration against measured tables.

mod calibrate;
mod engine;
pub mod presets;
mod scenario;
mod sched;
mod trace;

pub use calibrate::{calibrate, least_squares, CalibratedProfile, Fit, MAX_RESIDUAL};
pub use engine::{EventKind, EventQueue, OpTiming, Penalty, RailJob, SimEvent, SimParams, Simulator};
pub use scenario::{parse_size, parse_sizes, RailSpec, RailsFile, Scenario, ScenarioRow, SizeSpec, TraceSpec};
pub use sched::{
    simulate_allreduce, single_rail_latencies, threshold_bytes, SimBench, SimResult, Scheduler, DEFAULT_SLICE_BYTES,
    DEFAULT_SLICE_OVERHEAD_US,
};
pub use trace::{simulate_failure_trace, Outage, TraceConfig, TraceSample};
