//! Value types shared by every layer: rail profiles, buffer segments, size
//! buckets, and the two closed-form cost models (ring volume and network
//! efficiency).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per tensor element. Payloads are always `f32`.
pub const ELEMENT_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RailId(pub u16);

impl fmt::Display for RailId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProtocolKind {
    Tcp,
    Sharp,
    Glex,
    Custom,
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProtocolKind::Tcp => "TCP",
            ProtocolKind::Sharp => "SHARP",
            ProtocolKind::Glex => "GLEX",
            ProtocolKind::Custom => "CUSTOM",
        };
        f.write_str(s)
    }
}

/// A measured `(message size, latency)` sample used to shape or model a rail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub size: u64,
    pub latency_us: f64,
}

impl CalibrationPoint {
    pub fn new(size: u64, latency_us: f64) -> Self {
        Self { size, latency_us }
    }
}

/// Performance model of one rail.
///
/// `t_setup_us` is the fixed per-message latency and `bandwidth_bps` the
/// effective link bandwidth in bytes per second. When `efficiency_points` is
/// present, [`RailProfile::message_latency_us`] interpolates between the
/// samples instead of using the two-parameter model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RailProfile {
    pub rail_id: RailId,
    pub protocol: ProtocolKind,
    pub t_setup_us: f64,
    pub bandwidth_bps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efficiency_points: Option<Vec<CalibrationPoint>>,
    pub max_frame_payload: usize,
}

impl RailProfile {
    pub const DEFAULT_MAX_FRAME: usize = 64 * 1024;

    pub fn new(rail_id: u16, protocol: ProtocolKind, t_setup_us: f64, bandwidth_bps: f64) -> Result<Self> {
        let profile = Self {
            rail_id: RailId(rail_id),
            protocol,
            t_setup_us,
            bandwidth_bps,
            efficiency_points: None,
            max_frame_payload: Self::DEFAULT_MAX_FRAME,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn with_points(mut self, points: Vec<CalibrationPoint>) -> Result<Self> {
        self.efficiency_points = Some(points);
        self.validate()?;
        Ok(self)
    }

    pub fn with_max_frame(mut self, max_frame_payload: usize) -> Result<Self> {
        self.max_frame_payload = max_frame_payload;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_setup_us >= 0.0) || !self.t_setup_us.is_finite() {
            return Err(Error::InvalidProfile(format!(
                "rail {}: t_setup must be finite and >= 0, got {}",
                self.rail_id, self.t_setup_us
            )));
        }
        if !(self.bandwidth_bps > 0.0) {
            return Err(Error::InvalidProfile(format!(
                "rail {}: bandwidth must be > 0, got {}",
                self.rail_id, self.bandwidth_bps
            )));
        }
        if self.max_frame_payload == 0 {
            return Err(Error::InvalidProfile(format!(
                "rail {}: max_frame_payload must be > 0",
                self.rail_id
            )));
        }
        if let Some(points) = &self.efficiency_points {
            if points.is_empty() {
                return Err(Error::InvalidProfile(format!(
                    "rail {}: efficiency_points present but empty",
                    self.rail_id
                )));
            }
            for w in points.windows(2) {
                if w[1].size <= w[0].size || w[1].latency_us <= w[0].latency_us {
                    return Err(Error::InvalidProfile(format!(
                        "rail {}: efficiency_points must be strictly increasing in size and latency",
                        self.rail_id
                    )));
                }
            }
            if points.iter().any(|p| !(p.latency_us >= 0.0)) {
                return Err(Error::InvalidProfile(format!(
                    "rail {}: negative calibration latency",
                    self.rail_id
                )));
            }
        }
        Ok(())
    }

    /// Pure transfer time `S / B` in microseconds.
    pub fn transfer_us(&self, bytes: u64) -> f64 {
        if self.bandwidth_bps.is_infinite() {
            0.0
        } else {
            bytes as f64 / self.bandwidth_bps * 1e6
        }
    }

    /// Latency of one `bytes`-sized message on this rail.
    pub fn message_latency_us(&self, bytes: u64) -> f64 {
        self.message_latency_at(bytes as f64)
    }

    pub fn message_latency_at(&self, bytes: f64) -> f64 {
        match &self.efficiency_points {
            Some(points) => interpolate_at(points, bytes),
            None if self.bandwidth_bps.is_infinite() => self.t_setup_us,
            None => self.t_setup_us + bytes / self.bandwidth_bps * 1e6,
        }
    }
}

/// Piecewise-linear interpolation through calibration samples.
///
/// Below the first sample the latency is held flat (small messages are
/// setup-bound); above the last one the final segment's slope is extended.
pub fn interpolate(points: &[CalibrationPoint], bytes: u64) -> f64 {
    interpolate_at(points, bytes as f64)
}

/// [`interpolate`] at a fractional byte count.
pub fn interpolate_at(points: &[CalibrationPoint], bytes: f64) -> f64 {
    debug_assert!(!points.is_empty());
    let first = points[0];
    if points.len() == 1 || bytes <= first.size as f64 {
        return first.latency_us;
    }
    let idx = points.partition_point(|p| (p.size as f64) < bytes);
    let (a, b) = if idx >= points.len() {
        (points[points.len() - 2], points[points.len() - 1])
    } else {
        (points[idx - 1], points[idx])
    };
    let slope = (b.latency_us - a.latency_us) / (b.size - a.size) as f64;
    a.latency_us + slope * (bytes - a.size as f64)
}

/// An `(offset, length)` byte slice of the shared reduction buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub offset: u64,
    pub len: u64,
}

impl Segment {
    pub fn new(offset: u64, len: u64) -> Self {
        Self { offset, len }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Element range covered by this segment. Both ends must be 4-byte aligned.
    pub fn elements(&self) -> std::ops::Range<usize> {
        debug_assert_eq!(self.offset % ELEMENT_BYTES, 0);
        debug_assert_eq!(self.len % ELEMENT_BYTES, 0);
        (self.offset / ELEMENT_BYTES) as usize..(self.end() / ELEMENT_BYTES) as usize
    }

    /// Checks that `segments` are pairwise disjoint and exactly cover `[0, total)`.
    pub fn check_cover(segments: &[Segment], total: u64) -> Result<()> {
        let mut sorted: Vec<Segment> = segments.to_vec();
        sorted.sort_by_key(|s| (s.offset, s.len));
        let mut cursor = 0u64;
        for s in &sorted {
            if s.offset != cursor {
                return Err(Error::invalid(format!(
                    "segments leave a gap or overlap at byte {cursor} (next segment starts at {})",
                    s.offset
                )));
            }
            cursor = s.end();
        }
        if cursor != total {
            return Err(Error::invalid(format!(
                "segments cover {cursor} bytes, buffer has {total}"
            )));
        }
        Ok(())
    }
}

/// Gradient payload carrier.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor {
    pub elements: Vec<f32>,
}

impl Tensor {
    pub fn new(elements: Vec<f32>) -> Self {
        Self { elements }
    }

    pub fn zeros(len: usize) -> Self {
        Self { elements: vec![0.0; len] }
    }

    pub fn byte_length(&self) -> u64 {
        self.elements.len() as u64 * ELEMENT_BYTES
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.elements
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.elements
    }
}

/// Power-of-two size class: bucket `k` holds payloads in `[2^k, 2^(k+1))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SizeBucket(pub u32);

impl SizeBucket {
    /// Bucket of a payload size. Zero is folded into bucket 0 with size 1.
    pub fn of(size: u64) -> Self {
        SizeBucket(63 - size.max(1).leading_zeros())
    }

    pub fn lower_bound(&self) -> u64 {
        1u64 << self.0
    }

    pub fn upper_bound(&self) -> u64 {
        1u64.checked_shl(self.0 + 1).unwrap_or(u64::MAX)
    }
}

impl fmt::Display for SizeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "2^{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ReduceOp {
    #[default]
    Sum,
}

impl ReduceOp {
    pub fn apply(&self, acc: &mut [f32], incoming: &[f32]) {
        debug_assert_eq!(acc.len(), incoming.len());
        match self {
            ReduceOp::Sum => {
                for (a, b) in acc.iter_mut().zip(incoming) {
                    *a += *b;
                }
            }
        }
    }
}

/// Bytes each rank sends in a ring allreduce of `payload` bytes over
/// `node_count` ranks: `2 (N - 1) M / N`, rounded to the nearest byte.
pub fn ring_volume(node_count: usize, payload: u64) -> Result<u64> {
    if node_count < 2 {
        return Err(Error::invalid(format!("ring_volume needs at least 2 nodes, got {node_count}")));
    }
    let n = node_count as u128;
    let num = 4 * (n - 1) * payload as u128 + n;
    Ok((num / (2 * n)) as u64)
}

/// Fraction of message latency spent moving payload:
/// `1 / (1 + t_setup / (S / B))`.
pub fn network_efficiency(profile: &RailProfile, payload: u64) -> Result<f64> {
    if payload == 0 {
        return Err(Error::invalid("network_efficiency needs a positive payload"));
    }
    let transfer = profile.transfer_us(payload);
    if transfer == 0.0 {
        return Ok(if profile.t_setup_us == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 / (1.0 + profile.t_setup_us / transfer))
}

/// Rounds a byte count down to a whole number of elements.
pub fn round_down_to_element(bytes: u64) -> u64 {
    bytes - bytes % ELEMENT_BYTES
}
