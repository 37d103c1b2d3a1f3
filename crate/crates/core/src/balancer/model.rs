//! Closed-form latency models and the coefficient update rules.

use crate::error::{Error, Result};
use crate::types::{network_efficiency, RailId, RailProfile};

/// Per-rail latency as a function of the bytes assigned to that rail.
pub trait LatencyModel {
    fn rail_count(&self) -> usize;

    fn rail_id(&self, i: usize) -> RailId;

    /// Latency in microseconds of moving `bytes` over rail `i`.
    fn latency_us(&self, i: usize, bytes: f64) -> f64;

    /// Real-time throughput in bytes per second at `bytes`.
    fn throughput_bps(&self, i: usize, bytes: f64) -> f64 {
        bytes / self.latency_us(i, bytes) * 1e6
    }
}

impl LatencyModel for [RailProfile] {
    fn rail_count(&self) -> usize {
        self.len()
    }

    fn rail_id(&self, i: usize) -> RailId {
        self[i].rail_id
    }

    fn latency_us(&self, i: usize, bytes: f64) -> f64 {
        self[i].message_latency_at(bytes)
    }

    /// `B * efficiency`, which equals `S / (t_setup + S / B)`.
    fn throughput_bps(&self, i: usize, bytes: f64) -> f64 {
        let p = &self[i];
        if p.efficiency_points.is_some() {
            return bytes / p.message_latency_at(bytes) * 1e6;
        }
        if p.bandwidth_bps.is_infinite() {
            return if p.t_setup_us == 0.0 { f64::INFINITY } else { bytes / p.t_setup_us * 1e6 };
        }
        match network_efficiency(p, bytes.ceil().max(1.0) as u64) {
            Ok(eff) => p.bandwidth_bps * eff,
            Err(_) => 0.0,
        }
    }
}

impl LatencyModel for Vec<RailProfile> {
    fn rail_count(&self) -> usize {
        self.as_slice().rail_count()
    }

    fn rail_id(&self, i: usize) -> RailId {
        self.as_slice().rail_id(i)
    }

    fn latency_us(&self, i: usize, bytes: f64) -> f64 {
        self.as_slice().latency_us(i, bytes)
    }

    fn throughput_bps(&self, i: usize, bytes: f64) -> f64 {
        self.as_slice().throughput_bps(i, bytes)
    }
}

/// Ring allreduce over `node_count` ranks: `2(N-1)` messages of `S/N` bytes.
#[derive(Debug, Clone)]
pub struct RingModel {
    pub profiles: Vec<RailProfile>,
    pub node_count: usize,
}

impl LatencyModel for RingModel {
    fn rail_count(&self) -> usize {
        self.profiles.len()
    }

    fn rail_id(&self, i: usize) -> RailId {
        self.profiles[i].rail_id
    }

    fn latency_us(&self, i: usize, bytes: f64) -> f64 {
        let n = self.node_count.max(2) as f64;
        2.0 * (n - 1.0) * self.profiles[i].message_latency_at(bytes / n)
    }
}

/// Restricts a model to a subset of its rails.
pub struct Subset<'a> {
    pub inner: &'a dyn LatencyModel,
    pub index: Vec<usize>,
}

impl LatencyModel for Subset<'_> {
    fn rail_count(&self) -> usize {
        self.index.len()
    }

    fn rail_id(&self, i: usize) -> RailId {
        self.inner.rail_id(self.index[i])
    }

    fn latency_us(&self, i: usize, bytes: f64) -> f64 {
        self.inner.latency_us(self.index[i], bytes)
    }

    fn throughput_bps(&self, i: usize, bytes: f64) -> f64 {
        self.inner.throughput_bps(self.index[i], bytes)
    }
}

/// Extra cost of coordinating a multi-rail operation, in microseconds:
/// `fixed + saturating * S / (S + half_bytes) + S / staging_bps`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyncModel {
    pub fixed_us: f64,
    #[serde(default)]
    pub saturating_us: f64,
    #[serde(default = "one")]
    pub half_bytes: f64,
    #[serde(default = "inf")]
    pub staging_bps: f64,
}

fn one() -> f64 {
    1.0
}

fn inf() -> f64 {
    f64::INFINITY
}

impl SyncModel {
    pub fn constant(us: f64) -> Self {
        Self { fixed_us: us, saturating_us: 0.0, half_bytes: 1.0, staging_bps: f64::INFINITY }
    }

    pub fn at_us(&self, bytes: f64) -> f64 {
        let sat = if self.saturating_us == 0.0 { 0.0 } else { self.saturating_us * bytes / (bytes + self.half_bytes) };
        let staging = if self.staging_bps.is_infinite() { 0.0 } else { bytes / self.staging_bps * 1e6 };
        self.fixed_us + sat + staging
    }
}

impl Default for SyncModel {
    fn default() -> Self {
        Self::constant(0.0)
    }
}

fn check_alpha(alpha: &[f64], rails: usize) -> Result<()> {
    if alpha.len() != rails {
        return Err(Error::invalid(format!("alpha has {} entries for {rails} rails", alpha.len())));
    }
    if alpha.iter().any(|a| !(a.is_finite() && *a >= -1e-12)) {
        return Err(Error::invalid(format!("alpha {alpha:?} has a negative or non-finite entry")));
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("alpha sums to {sum}, not 1")));
    }
    Ok(())
}

/// Ratio of real-time throughputs between the two fastest rails at split
/// `alpha` of payload `bytes`, oriented to be at least 1. A rail with a zero
/// share is probed at the full payload.
pub fn efficiency_ratio(model: &dyn LatencyModel, alpha: &[f64], bytes: f64) -> Result<f64> {
    let n = model.rail_count();
    if n < 2 {
        return Err(Error::invalid("efficiency ratio needs at least two rails"));
    }
    check_alpha(alpha, n)?;
    let mut thr = Vec::with_capacity(n);
    for (i, a) in alpha.iter().enumerate() {
        let share = if *a > 0.0 { a * bytes } else { bytes };
        let t = model.throughput_bps(i, share.max(1.0));
        if !(t > 0.0) {
            return Err(Error::DegenerateProfile(model.rail_id(i)));
        }
        thr.push(t);
    }
    thr.sort_by(|a, b| b.total_cmp(a));
    if thr[0].is_infinite() && thr[1].is_infinite() {
        return Ok(1.0);
    }
    Ok(thr[0] / thr[1])
}

/// Single-rail latency: `min_i latency_i(S)` and its rail, lowest id on ties.
pub fn cold_latency(model: &dyn LatencyModel, bytes: f64) -> (f64, RailId) {
    let mut best = (f64::INFINITY, RailId(u16::MAX));
    for i in 0..model.rail_count() {
        let t = model.latency_us(i, bytes);
        let id = model.rail_id(i);
        if t < best.0 || (t == best.0 && id < best.1) {
            best = (t, id);
        }
    }
    best
}

/// Split latency: `max_i latency_i(alpha_i S) + sync`, over rails with a
/// non-zero share.
pub fn hot_latency(model: &dyn LatencyModel, alpha: &[f64], bytes: f64, sync_us: f64) -> Result<f64> {
    check_alpha(alpha, model.rail_count())?;
    let worst = alpha
        .iter()
        .enumerate()
        .filter(|(_, a)| **a > 0.0)
        .map(|(i, a)| model.latency_us(i, a * bytes))
        .fold(0.0f64, f64::max);
    Ok(worst + sync_us)
}

/// Initial split from latencies measured under a uniform split:
/// `alpha_i = (T - T_i) / (T (R - 1))` with `T = sum T_i`, `R` rails.
pub fn init_coefficients(latencies: &[f64]) -> Result<Vec<f64>> {
    if latencies.len() < 2 {
        return Err(Error::InvalidTelemetry("initial coefficients need at least two rails".into()));
    }
    if let Some(bad) = latencies.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::InvalidTelemetry(format!("latency {bad} is not positive")));
    }
    let total: f64 = latencies.iter().sum();
    let r = latencies.len() as f64;
    Ok(latencies.iter().map(|t| (total - t) / (total * (r - 1.0))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub alpha: Vec<f64>,
    pub converged: bool,
}

/// One projected subgradient step on `max_i T_i`.
///
/// The slowest rail gives up `eta/2 * (Tmax - Tmin) / Tmax` of the payload
/// (capped at its share), which the other rails take in proportion to their
/// slack `Tmax - T_j`; the result is clipped at zero and renormalised, so the
/// L1 move is at most `eta`. Latencies within `eps` of each other are a
/// fixed point.
pub fn update_coefficients(alpha: &[f64], latencies: &[f64], eta: f64, eps: f64) -> Result<Update> {
    if alpha.len() != latencies.len() {
        return Err(Error::invalid("alpha and latencies differ in length"));
    }
    check_alpha(alpha, alpha.len())?;
    if latencies.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidTelemetry(format!("latencies {latencies:?}")));
    }
    let (mut imax, mut tmax, mut tmin) = (0, f64::MIN, f64::MAX);
    for (i, &t) in latencies.iter().enumerate() {
        if t > tmax {
            imax = i;
            tmax = t;
        }
        tmin = tmin.min(t);
    }
    if tmax <= 0.0 || (tmax - tmin) / tmax <= eps {
        return Ok(Update { alpha: alpha.to_vec(), converged: true });
    }
    let delta = (eta / 2.0 * (tmax - tmin) / tmax).min(alpha[imax]);
    let slack: Vec<f64> = latencies.iter().enumerate().map(|(j, t)| if j == imax { 0.0 } else { tmax - t }).collect();
    let total_slack: f64 = slack.iter().sum();
    let mut next = alpha.to_vec();
    next[imax] -= delta;
    for (j, s) in slack.iter().enumerate() {
        next[j] += delta * s / total_slack;
    }
    Ok(Update { alpha: project(&next), converged: false })
}

/// Clips at zero and renormalises onto the simplex.
pub fn project(alpha: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = alpha.iter().map(|a| a.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum <= 0.0 {
        return vec![1.0 / alpha.len() as f64; alpha.len()];
    }
    clipped.iter().map(|a| a / sum).collect()
}

/// Split that makes every used rail finish at the same time, found by
/// bisection on the common finish time. This is the minimiser of the model's
/// `max_i latency_i(alpha_i S)`.
pub fn equalize(model: &dyn LatencyModel, bytes: f64) -> Vec<f64> {
    let n = model.rail_count();
    if n == 1 || bytes <= 0.0 {
        return vec![1.0 / n as f64; n];
    }
    let share_at = |i: usize, t: f64| -> f64 {
        if model.latency_us(i, 0.0) >= t {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, bytes);
        if model.latency_us(i, hi) <= t {
            return hi;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if model.latency_us(i, mid) <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let (mut lo, mut hi) = (0.0, cold_latency(model, bytes).0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let carried: f64 = (0..n).map(|i| share_at(i, mid)).sum();
        if carried >= bytes {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let shares: Vec<f64> = (0..n).map(|i| share_at(i, hi)).collect();
    project(&shares)
}

/// Payload size where cold and hot latency meet, found by bisection on
/// `log2 S` over `[lo, hi]` bytes. `alpha_at` supplies the split used at each
/// probed size. Returns `None` when hot never beats cold in the range.
pub fn find_threshold(
    model: &dyn LatencyModel,
    sync: &SyncModel,
    alpha_at: &dyn Fn(f64) -> Vec<f64>,
    lo: f64,
    hi: f64,
) -> Option<f64> {
    let gap = |s: f64| -> f64 {
        let cold = cold_latency(model, s).0;
        let hot = hot_latency(model, &alpha_at(s), s, sync.at_us(s)).unwrap_or(f64::INFINITY);
        hot - cold
    };
    if gap(hi) >= 0.0 {
        return None;
    }
    if gap(lo) < 0.0 {
        return Some(lo);
    }
    let (mut a, mut b) = (lo.log2(), hi.log2());
    while b - a > 1e-10 {
        let mid = 0.5 * (a + b);
        if gap(mid.exp2()) >= 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Some(b.exp2())
}
