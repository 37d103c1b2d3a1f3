//! Multi-rail allreduce.
//!
//! A payload is partitioned across several network rails, each rail runs
//! its own ring allreduce over its slice, and a balancer decides the split
//! from measured latencies. Failed rails hand their slice to a survivor.

pub mod balancer;
pub mod collective;
pub mod comm;
pub mod error;
pub mod faults;
pub mod simnet;
pub mod transport;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
