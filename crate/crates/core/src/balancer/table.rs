use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{RailId, SizeBucket};

pub const WINDOW_LEN: usize = 100;

/// Rolling window of per-operation costs for one `(rail, bucket)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyWindow {
    pub rail: RailId,
    pub bucket: SizeBucket,
    samples: Vec<f64>,
}

impl LatencyWindow {
    pub fn new(rail: RailId, bucket: SizeBucket) -> Self {
        Self { rail, bucket, samples: Vec::with_capacity(WINDOW_LEN) }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.samples.is_empty()).then(|| self.samples.iter().sum::<f64>() / self.samples.len() as f64)
    }

    /// Appends a sample. On the 100th, returns the mean and empties the window.
    pub fn push(&mut self, latency_us: f64) -> Option<f64> {
        self.samples.push(latency_us);
        if self.samples.len() < WINDOW_LEN {
            return None;
        }
        let mean = self.mean();
        self.samples.clear();
        mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum BucketState {
    Cold { rail: RailId },
    Hot { alpha: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Uniform split, waiting for the first window of latencies.
    Probe,
    Tuning,
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketEntry {
    #[serde(flatten)]
    pub state: BucketState,
    pub iters: u32,
    pub phase: Phase,
}

impl BucketEntry {
    pub fn converged(&self) -> bool {
        self.phase == Phase::Converged
    }
}

/// Per-bucket allocation state, indexed by rail position in `rails`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocationTable {
    pub rails: Vec<RailId>,
    pub buckets: BTreeMap<SizeBucket, BucketEntry>,
}

impl AllocationTable {
    pub fn new(rails: Vec<RailId>) -> Self {
        Self { rails, buckets: BTreeMap::new() }
    }

    pub fn get(&self, bucket: SizeBucket) -> Option<&BucketEntry> {
        self.buckets.get(&bucket)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
