//! Token-bucket pacing that makes a fast loopback link behave like a rail
//! with a given setup latency and bandwidth.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::types::{interpolate, CalibrationPoint, RailProfile};

/// Shared by every virtual channel that rides the same physical link.
///
/// A message becomes eligible `t_setup` after it was enqueued; its frames are
/// then released one at a time, each only after the bucket has refilled by
/// that frame's length at the link bandwidth. Bucket capacity is one frame,
/// so idle time never turns into a burst.
#[derive(Debug)]
pub struct Pacer {
    t_setup: Duration,
    bandwidth_bps: f64,
    points: Option<Vec<CalibrationPoint>>,
    next_free: Mutex<Option<Instant>>,
}

impl Pacer {
    pub fn new(profile: &RailProfile) -> Self {
        Self {
            t_setup: Duration::from_secs_f64(profile.t_setup_us / 1e6),
            bandwidth_bps: profile.bandwidth_bps,
            points: profile.efficiency_points.clone(),
            next_free: Mutex::new(None),
        }
    }

    /// Added latency before the first byte of a `bytes`-long message leaves.
    pub fn setup_delay(&self, bytes: u64) -> Duration {
        match &self.points {
            Some(points) => {
                let target_us = interpolate(points, bytes);
                let wire_us = self.wire_time(bytes).as_secs_f64() * 1e6;
                Duration::from_secs_f64(((target_us - wire_us).max(0.0)) / 1e6)
            }
            None => self.t_setup,
        }
    }

    pub fn wire_time(&self, bytes: u64) -> Duration {
        if self.bandwidth_bps.is_infinite() || bytes == 0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(bytes as f64 / self.bandwidth_bps)
        }
    }

    /// Reserves link time for one frame and returns the instant at which it
    /// may be written.
    pub fn reserve(&self, not_before: Instant, len: u64) -> Instant {
        let mut next = self.next_free.lock().expect("pacer lock");
        let start = match *next {
            Some(free) if free > not_before => free,
            _ => not_before,
        };
        let release = start + self.wire_time(len);
        *next = Some(release);
        release
    }

    pub fn is_identity(&self) -> bool {
        self.t_setup.is_zero() && self.bandwidth_bps.is_infinite() && self.points.is_none()
    }
}

/// Sleeps until `deadline`. Short waits are finished with a yield loop so the
/// release instant is not pushed out by a whole scheduler tick.
pub fn sleep_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_micros(150);
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN {
            std::thread::sleep(left - SPIN);
        } else {
            std::thread::yield_now();
        }
    }
}
