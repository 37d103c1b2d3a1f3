use serde::{Deserialize, Serialize};

use crate::balancer::{LatencyModel, RingModel};
use crate::error::{Error, Result};
use crate::types::{CalibrationPoint, ProtocolKind, RailProfile};

/// Largest relative error a calibrated model may show on its own samples.
pub const MAX_RESIDUAL: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Fit {
    /// `latency = intercept_us + per_byte_us * S` at the calibration node count.
    Linear { intercept_us: f64, per_byte_us: f64 },
    /// Exact piecewise-linear interpolation through the samples.
    Table,
}

/// A rail profile fitted to whole-allreduce latency samples taken on
/// `node_count` nodes.
///
/// The samples are mapped to the per-step model (each of the `2(N-1)` ring
/// steps moves an `S/N` message), so the profile can be evaluated at any
/// node count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedProfile {
    pub profile: RailProfile,
    pub fit: Fit,
    pub node_count: usize,
    pub samples: Vec<CalibrationPoint>,
}

impl CalibratedProfile {
    /// Allreduce latency on `nodes` nodes.
    pub fn op_latency_us(&self, nodes: usize, bytes: f64) -> f64 {
        RingModel { profiles: vec![self.profile.clone()], node_count: nodes }.latency_us(0, bytes)
    }

    /// Worst relative error against the calibration samples.
    pub fn max_residual(&self) -> f64 {
        self.samples
            .iter()
            .map(|p| (self.op_latency_us(self.node_count, p.size as f64) - p.latency_us).abs() / p.latency_us)
            .fold(0.0, f64::max)
    }
}

/// Ordinary least squares `y = a + b x`.
pub fn least_squares(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

/// Fits a rail to `(size, allreduce latency)` samples measured on
/// `node_count` nodes. A straight line is used when it has a non-negative
/// intercept and reproduces every sample within 10%; otherwise the samples
/// become an interpolation table.
pub fn calibrate(rail_id: u16, protocol: ProtocolKind, samples: &[(u64, f64)], node_count: usize) -> Result<CalibratedProfile> {
    if samples.len() < 2 {
        return Err(Error::InvalidProfile(format!("rail {rail_id}: calibration needs at least 2 samples")));
    }
    if node_count < 2 {
        return Err(Error::InvalidProfile("calibration node count must be at least 2".into()));
    }
    let mut pts: Vec<CalibrationPoint> = samples.iter().map(|&(s, l)| CalibrationPoint::new(s, l)).collect();
    pts.sort_by_key(|p| p.size);
    if pts.iter().any(|p| p.size == 0 || !(p.latency_us > 0.0) || !p.latency_us.is_finite()) {
        return Err(Error::InvalidProfile(format!("rail {rail_id}: samples need positive sizes and latencies")));
    }
    if pts.windows(2).any(|w| w[0].size == w[1].size) {
        return Err(Error::InvalidProfile(format!("rail {rail_id}: duplicate calibration size")));
    }
    let n = node_count as f64;
    let steps = 2.0 * (n - 1.0);
    let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.size as f64, p.latency_us)).collect();
    let (a, b) = least_squares(&xy);
    if a >= 0.0 && b > 0.0 {
        // latency = steps * (t + (S/N) / B)  =>  t = a / steps, B = steps / (N b)
        let t = a / steps;
        let bw = steps / (n * b) * 1e6;
        let profile = RailProfile::new(rail_id, protocol, t, bw)?;
        let cal = CalibratedProfile { profile, fit: Fit::Linear { intercept_us: a, per_byte_us: b }, node_count, samples: pts.clone() };
        if cal.max_residual() <= MAX_RESIDUAL {
            return Ok(cal);
        }
    }
    let msg: Vec<CalibrationPoint> =
        pts.iter().map(|p| CalibrationPoint::new(p.size / node_count as u64, p.latency_us / steps)).collect();
    let last = &msg[msg.len() - 2..];
    let slope = (last[1].latency_us - last[0].latency_us) / (last[1].size - last[0].size) as f64;
    if !(slope > 0.0) {
        return Err(Error::InvalidProfile(format!("rail {rail_id}: latency must grow with size")));
    }
    let intercept = (last[0].latency_us - slope * last[0].size as f64).max(0.0);
    let profile = RailProfile::new(rail_id, protocol, intercept, 1e6 / slope)?.with_points(msg)?;
    Ok(CalibratedProfile { profile, fit: Fit::Table, node_count, samples: pts })
}
