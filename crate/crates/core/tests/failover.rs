use std::time::{Duration, Instant};

use nezha::comm::{ClockMode, CommConfig, Communicator, OpReport};
use nezha::faults::{FaultConfig, HealthStatus};
use nezha::transport::{memory_mesh, ConnectionSet, MeshOptions};
use nezha::{ProtocolKind, RailId, RailProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rails() -> Vec<RailProfile> {
    vec![
        RailProfile::new(0, ProtocolKind::Tcp, 5.0, 1e9).unwrap().with_max_frame(4096).unwrap(),
        RailProfile::new(1, ProtocolKind::Tcp, 5.0, 1e9).unwrap().with_max_frame(4096).unwrap(),
    ]
}

fn cfg() -> CommConfig {
    CommConfig { clock: ClockMode::Model, measure_sync: false, packet_bytes: 16 << 10, ..Default::default() }
}

fn inputs(world: usize, len: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..world).map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn oracle(inputs: &[Vec<f32>]) -> Vec<f64> {
    (0..inputs[0].len()).map(|i| inputs.iter().map(|v| v[i] as f64).sum()).collect()
}

fn assert_close(got: &[f32], want: &[f64]) {
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((*g as f64 - w).abs() <= 1e-5 * w.abs().max(1.0), "element {i}: {g} vs {w}");
    }
}

/// Heartbeat timing is wall-clock; keep these tests from starving each other.
static SERIAL: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Runs `body` on every rank concurrently.
fn on_ranks<T: Send>(
    sets: Vec<ConnectionSet>,
    cfg: CommConfig,
    body: impl Fn(&mut Communicator) -> T + Sync,
) -> Vec<T> {
    std::thread::scope(|s| {
        let hs: Vec<_> = sets
            .into_iter()
            .map(|conns| {
                let (cfg, body) = (cfg.clone(), &body);
                s.spawn(move || body(&mut Communicator::new(conns, cfg).unwrap()))
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

#[test]
fn dual_rail_matches_oracle() {
    let _serial = serial();
    let world = 3;
    let data = inputs(world, 30_001, 1);
    let want = oracle(&data);
    let sets = memory_mesh(world, &rails(), &MeshOptions::default()).unwrap();
    let out = on_ranks(sets, cfg(), |c| {
        let mut v = data[c.rank()].clone();
        let r = c.allreduce(&mut v).unwrap();
        (v, r)
    });
    for (v, r) in &out {
        assert_close(v, &want);
        assert!(r.allocation.hot && r.handoffs.is_empty());
    }
}

#[test]
fn idle_mesh_before_communicator_is_not_a_failure() {
    let _serial = serial();
    let world = 3;
    let data = inputs(world, 4096, 2);
    let want = oracle(&data);
    let sets = memory_mesh(world, &rails(), &MeshOptions::default()).unwrap();
    std::thread::sleep(Duration::from_millis(400));
    let out = on_ranks(sets, cfg(), |c| {
        let mut v = data[c.rank()].clone();
        let r = c.allreduce(&mut v).unwrap();
        c.sync().unwrap();
        (v, r)
    });
    for (v, r) in &out {
        assert_close(v, &want);
        assert!(r.handoffs.is_empty());
    }
}

#[test]
fn ranks_leaving_one_by_one_do_not_fail_the_others() {
    let _serial = serial();
    let world = 4;
    let data = inputs(world, 1024, 3);
    let sets = memory_mesh(world, &rails(), &MeshOptions::default()).unwrap();
    on_ranks(sets, cfg(), |c| {
        let mut v = data[c.rank()].clone();
        c.allreduce(&mut v).unwrap();
        c.sync().unwrap();
        // Stagger departures so late ranks watch early ones leave.
        std::thread::sleep(Duration::from_millis(60 * c.rank() as u64));
        assert!(c.health().failed().is_empty(), "rank {}", c.rank());
    });
}

#[test]
fn kill_rail_mid_operation() {
    let _serial = serial();
    let world = 3;
    let data = inputs(world, 50_000, 2);
    let want = oracle(&data);
    let sets = memory_mesh(world, &rails(), &MeshOptions::default()).unwrap();
    sets[1].channel(RailId(1), 2).unwrap().inject_close_at(3);
    let out: Vec<(Vec<f32>, OpReport, OpReport)> = on_ranks(sets, cfg(), |c| {
        let mut v = data[c.rank()].clone();
        let first = c.allreduce(&mut v).unwrap();
        let mut w = data[c.rank()].clone();
        let second = c.allreduce(&mut w).unwrap();
        assert_eq!(v, w);
        (v, first, second)
    });
    for (v, first, second) in &out {
        assert_close(v, &want);
        assert_eq!(first.handoffs.len(), 1);
        let h = first.handoffs[0];
        assert_eq!((h.ticket.source, h.ticket.target), (RailId(1), RailId(0)));
        assert!(h.resume < Duration::from_millis(200), "{:?}", h.resume);
        assert_eq!(second.allocation.rails().collect::<Vec<_>>(), vec![RailId(0)]);
        assert!(second.handoffs.is_empty());
    }
}

#[test]
fn failure_between_operations() {
    let _serial = serial();
    let world = 2;
    let data = inputs(world, 20_000, 3);
    let want = oracle(&data);
    let sets = memory_mesh(world, &rails(), &MeshOptions::default()).unwrap();
    let out = on_ranks(sets, cfg(), |c| {
        let mut v = data[c.rank()].clone();
        c.allreduce(&mut v).unwrap();
        if c.rank() == 0 {
            c.connections().close_rail(RailId(1));
        }
        std::thread::sleep(Duration::from_millis(30));
        let mut w = data[c.rank()].clone();
        let first = c.allreduce(&mut w).unwrap();
        assert_close(&w, &want);
        let mut x = data[c.rank()].clone();
        let second = c.allreduce(&mut x).unwrap();
        (x, first, second, c.health().status(RailId(1)))
    });
    for (x, first, second, status) in &out {
        assert_close(x, &want);
        // The idle failure is only agreed on at the next commit, so that
        // operation still hands the dead rail's share over once.
        assert!(first.handoffs.iter().all(|h| h.ticket.source == RailId(1)));
        assert_eq!(second.allocation.rails().collect::<Vec<_>>(), vec![RailId(0)]);
        assert!(second.handoffs.is_empty());
        assert_eq!(*status, Some(HealthStatus::Failed));
    }
}

#[test]
fn abrupt_close_is_failed_within_150ms() {
    let _serial = serial();
    let sets = memory_mesh(2, &rails(), &MeshOptions::default()).unwrap();
    on_ranks(sets, cfg(), |c| {
        if c.rank() == 1 {
            std::thread::sleep(Duration::from_millis(20));
            c.connections().channel(RailId(0), 0).unwrap().close();
        }
        let t0 = Instant::now();
        let deadline = t0 + Duration::from_secs(2);
        loop {
            if let Ok(t) = c.monitor().transitions().recv_timeout(Duration::from_millis(10)) {
                if t.to == HealthStatus::Failed {
                    assert_eq!(t.rail, RailId(0));
                    break;
                }
            }
            assert!(Instant::now() < deadline);
        }
        assert!(t0.elapsed() < Duration::from_millis(150 + 20), "{:?}", t0.elapsed());
    });
}

#[test]
fn short_stall_is_suspect_then_healthy() {
    let _serial = serial();
    let sets = memory_mesh(2, &rails(), &MeshOptions::default()).unwrap();
    let seen = on_ranks(sets, cfg(), |c| {
        if c.rank() == 0 {
            let ch = c.connections().channel(RailId(1), 1).unwrap();
            ch.pause();
            std::thread::sleep(Duration::from_millis(60));
            ch.resume();
        } else {
            std::thread::sleep(Duration::from_millis(60));
        }
        std::thread::sleep(Duration::from_millis(200));
        let ts: Vec<_> = c.monitor().transitions().try_iter().map(|t| t.to).collect();
        let status = c.health().status(RailId(1));
        // Keep both ranks' channels open until each has looked.
        c.sync().unwrap();
        (ts, status)
    });
    for (ts, status) in seen {
        // Whether the gap reaches two missed beats depends on where the stall
        // falls between heartbeats; it never reaches three.
        assert!(ts.is_empty() || ts == vec![HealthStatus::Suspect, HealthStatus::Healthy], "{ts:?}");
        assert_eq!(status, Some(HealthStatus::Healthy));
    }
}

#[test]
fn stalled_rail_fails_and_is_readmitted() {
    let _serial = serial();
    let world = 2;
    let data = inputs(world, 40_000, 4);
    let want = oracle(&data);
    let sets = memory_mesh(world, &rails(), &MeshOptions::default()).unwrap();
    let fast = CommConfig { faults: FaultConfig { readmit_after: Duration::from_millis(300), ..Default::default() }, ..cfg() };
    on_ranks(sets, fast, |c| {
        let mut v = data[c.rank()].clone();
        let before = c.allreduce(&mut v).unwrap().allocation.alpha;
        if c.rank() == 0 {
            let ch = c.connections().channel(RailId(1), 1).unwrap();
            ch.pause();
            std::thread::sleep(Duration::from_millis(250));
            ch.resume();
        } else {
            std::thread::sleep(Duration::from_millis(250));
        }
        let mut w = data[c.rank()].clone();
        let r = c.allreduce(&mut w).unwrap();
        assert_close(&w, &want);
        assert!(c.excluded().contains(&RailId(1)));
        assert!(r.allocation.rails().count() == 1 || r.handoffs.len() == 1);
        assert!(c.request_readmit(RailId(1)).is_err(), "link has not been clean long enough");
        assert!(matches!(c.request_readmit(RailId(7)), Err(nezha::Error::UnknownRail(_))));
        std::thread::sleep(Duration::from_millis(400));
        c.request_readmit(RailId(1)).unwrap();
        c.sync().unwrap();
        assert!(c.excluded().is_empty());
        let mut x = data[c.rank()].clone();
        let after = c.allreduce(&mut x).unwrap();
        assert_close(&x, &want);
        assert_eq!(after.allocation.alpha, before);
    });
}
