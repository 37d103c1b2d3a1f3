//! Full channel meshes, one per rail.

use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::channel::{memory_pair, tcp_channel, Channel, LinkId};
use super::frame::{Frame, MsgType, HEADER_LEN};
use super::rendezvous::{RendezvousRecord, RendezvousStore};
use super::shaping::Pacer;
use crate::error::{Error, Result};
use crate::types::{RailId, RailProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// Loopback TCP with no added delay.
    Tcp,
    /// Loopback TCP paced to each rail's profile.
    Shaped,
    /// In-process queues, no delay.
    Inmem,
    /// In-process queues paced to each rail's profile.
    ShapedInmem,
}

impl TransportKind {
    pub fn is_shaped(self) -> bool {
        matches!(self, TransportKind::Shaped | TransportKind::ShapedInmem)
    }

    pub fn is_in_process(self) -> bool {
        matches!(self, TransportKind::Inmem | TransportKind::ShapedInmem)
    }
}

#[derive(Debug, Clone)]
pub struct MeshOptions {
    pub shaped: bool,
    /// Every rail of a rank rides one physical link (and one pacer).
    pub shared_link: bool,
    pub timeout: Duration,
    pub host: String,
}

impl Default for MeshOptions {
    fn default() -> Self {
        Self { shaped: false, shared_link: false, timeout: Duration::from_secs(30), host: "127.0.0.1".into() }
    }
}

impl MeshOptions {
    pub fn shaped() -> Self {
        Self { shaped: true, ..Self::default() }
    }
}

/// One rank's view of the mesh: a channel to every peer on every rail.
#[derive(Debug)]
pub struct ConnectionSet {
    rank: usize,
    world_size: usize,
    rails: Vec<RailProfile>,
    channels: BTreeMap<RailId, Vec<Option<Channel>>>,
}

impl Drop for ConnectionSet {
    fn drop(&mut self) {
        self.depart(Duration::from_secs(1));
    }
}

impl ConnectionSet {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn rails(&self) -> &[RailProfile] {
        &self.rails
    }

    pub fn rail_ids(&self) -> Vec<RailId> {
        self.rails.iter().map(|r| r.rail_id).collect()
    }

    pub fn profile(&self, rail: RailId) -> Option<&RailProfile> {
        self.rails.iter().find(|r| r.rail_id == rail)
    }

    pub fn channel(&self, rail: RailId, peer: usize) -> Option<&Channel> {
        self.channels.get(&rail)?.get(peer)?.as_ref()
    }

    /// All channels ordered by `(rail_id, peer_rank)`.
    pub fn channels(&self) -> impl Iterator<Item = &Channel> {
        self.channels.values().flat_map(|v| v.iter().flatten())
    }

    pub fn rail_channels(&self, rail: RailId) -> impl Iterator<Item = &Channel> {
        self.channels.get(&rail).into_iter().flat_map(|v| v.iter().flatten())
    }

    /// Whether any channel on `rail` failed. Peers that left cleanly do not count.
    pub fn rail_is_down(&self, rail: RailId) -> bool {
        self.rail_channels(rail).any(Channel::has_failed)
    }

    /// Says goodbye on every open channel and waits for it to be written, so
    /// peers see everything sent so far and do not mistake the close for a failure.
    pub fn depart(&self, timeout: Duration) {
        let handles: Vec<_> = self.channels().filter(|c| !c.is_down()).map(Channel::send_goodbye).collect();
        for h in handles {
            let _ = h.wait_timeout(timeout);
        }
    }

    /// Closes every channel this rank holds on `rail`; peers observe
    /// channel-down on their side.
    pub fn close_rail(&self, rail: RailId) {
        for ch in self.rail_channels(rail) {
            ch.close();
        }
    }

    /// DATA bytes this rank has written on `rail`.
    pub fn bytes_sent(&self, rail: RailId) -> u64 {
        self.rail_channels(rail).map(Channel::bytes_sent).sum()
    }
}

fn validate(world_size: usize, rails: &[RailProfile]) -> Result<()> {
    if world_size < 2 {
        return Err(Error::invalid(format!("a mesh needs at least 2 ranks, got {world_size}")));
    }
    if rails.is_empty() {
        return Err(Error::invalid("a mesh needs at least one rail"));
    }
    for (i, r) in rails.iter().enumerate() {
        r.validate()?;
        if rails[..i].iter().any(|o| o.rail_id == r.rail_id) {
            return Err(Error::invalid(format!("duplicate rail id {}", r.rail_id)));
        }
    }
    Ok(())
}

fn link_for(rank: usize, rail: &RailProfile, rails: &[RailProfile], shared: bool) -> LinkId {
    let rail_id = if shared { rails[0].rail_id } else { rail.rail_id };
    LinkId { rank, rail: rail_id, index: 0 }
}

/// Pacers keyed by link, created lazily.
fn pacer_for(
    pacers: &mut BTreeMap<LinkId, Arc<Pacer>>,
    link: LinkId,
    rails: &[RailProfile],
    shaped: bool,
) -> Option<Arc<Pacer>> {
    if !shaped {
        return None;
    }
    let profile = rails.iter().find(|r| r.rail_id == link.rail).expect("link rail exists");
    Some(Arc::clone(pacers.entry(link).or_insert_with(|| Arc::new(Pacer::new(profile)))))
}

/// Builds every rank's connection set in one process over in-memory links.
pub fn memory_mesh(world_size: usize, rails: &[RailProfile], opts: &MeshOptions) -> Result<Vec<ConnectionSet>> {
    validate(world_size, rails)?;
    let mut sets: Vec<ConnectionSet> = (0..world_size)
        .map(|rank| ConnectionSet {
            rank,
            world_size,
            rails: rails.to_vec(),
            channels: rails.iter().map(|r| (r.rail_id, (0..world_size).map(|_| None).collect())).collect(),
        })
        .collect();
    let mut pacers = BTreeMap::new();
    for rail in rails {
        for a in 0..world_size {
            for b in a + 1..world_size {
                let la = link_for(a, rail, rails, opts.shared_link);
                let lb = link_for(b, rail, rails, opts.shared_link);
                let pa = pacer_for(&mut pacers, la, rails, opts.shaped);
                let pb = pacer_for(&mut pacers, lb, rails, opts.shaped);
                let (ca, cb) = memory_pair(rail.rail_id, (a, la), (b, lb), rail.max_frame_payload, (pa, pb));
                sets[a].channels.get_mut(&rail.rail_id).expect("rail")[b] = Some(ca);
                sets[b].channels.get_mut(&rail.rail_id).expect("rail")[a] = Some(cb);
            }
        }
    }
    Ok(sets)
}

fn handshake(rank: usize, rail: RailId) -> Frame {
    Frame::control(MsgType::Health, 0, rail.0 as u32, rank as u64)
}

/// Connects this rank to every peer on every rail over loopback TCP.
///
/// Each rank binds one listener per rail and publishes its address; once all
/// records are visible, a rank connects to every lower rank and accepts from
/// every higher one. The first frame on a new stream is a HEALTH frame
/// carrying the connector's rank in `offset` and the rail in `chunk_index`.
pub fn rendezvous(
    store: &dyn RendezvousStore,
    rank: usize,
    world_size: usize,
    rails: &[RailProfile],
    opts: &MeshOptions,
) -> Result<ConnectionSet> {
    validate(world_size, rails)?;
    if rank >= world_size {
        return Err(Error::invalid(format!("rank {rank} out of range for world size {world_size}")));
    }
    let deadline = Instant::now() + opts.timeout;
    let mut listeners = BTreeMap::new();
    for rail in rails {
        let bind = format!("{}:0", opts.host);
        let listener = TcpListener::bind(&bind).map_err(|source| Error::Bind { addr: bind.clone(), source })?;
        let addr = listener.local_addr()?.to_string();
        store.publish(&RendezvousRecord { rank, rail: rail.rail_id, addr })?;
        listeners.insert(rail.rail_id, listener);
    }
    let ids: Vec<RailId> = rails.iter().map(|r| r.rail_id).collect();
    let book = store.wait_all(world_size, &ids, opts.timeout)?;

    let mut set = ConnectionSet {
        rank,
        world_size,
        rails: rails.to_vec(),
        channels: rails.iter().map(|r| (r.rail_id, (0..world_size).map(|_| None).collect())).collect(),
    };
    let mut pacers = BTreeMap::new();
    for rail in rails {
        let link = link_for(rank, rail, rails, opts.shared_link);
        let pacer = pacer_for(&mut pacers, link, rails, opts.shaped);
        let wrap = |stream: TcpStream, peer: usize| {
            tcp_channel(stream, rail.rail_id, peer, link, rail.max_frame_payload, pacer.clone()).map_err(Error::from)
        };
        for peer in 0..rank {
            let addr = &book[&(peer, rail.rail_id)];
            let mut stream = connect_until(addr, deadline)?;
            handshake(rank, rail.rail_id).write_to(&mut stream)?;
            stream.flush()?;
            set.channels.get_mut(&rail.rail_id).expect("rail")[peer] = Some(wrap(stream, peer)?);
        }
        let listener = &listeners[&rail.rail_id];
        for _ in rank + 1..world_size {
            let (stream, peer) = accept_until(listener, rail.rail_id, world_size, deadline)?;
            let slot = &mut set.channels.get_mut(&rail.rail_id).expect("rail")[peer];
            if slot.is_some() || peer <= rank {
                return Err(Error::Protocol(format!("unexpected handshake from rank {peer} on rail {}", rail.rail_id)));
            }
            *slot = Some(wrap(stream, peer)?);
        }
    }
    Ok(set)
}

fn connect_until(addr: &str, deadline: Instant) -> Result<TcpStream> {
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e.into()),
            Err(_) => std::thread::sleep(Duration::from_millis(5)),
        }
    }
}

fn accept_until(listener: &TcpListener, rail: RailId, world_size: usize, deadline: Instant) -> Result<(TcpStream, usize)> {
    listener.set_nonblocking(true)?;
    let stream = loop {
        match listener.accept() {
            Ok((s, _)) => break s,
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::RendezvousTimeout { missing: 1 });
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    };
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(100))))?;
    let hello = Frame::read_from(&mut BufReader::with_capacity(HEADER_LEN, &stream), 0)?;
    stream.set_read_timeout(None)?;
    if hello.msg_type != MsgType::Health || hello.chunk_index != rail.0 as u32 {
        return Err(Error::Protocol(format!("bad handshake on rail {rail}: {hello:?}")));
    }
    let peer = hello.offset as usize;
    if peer >= world_size {
        return Err(Error::Protocol(format!("handshake from out-of-range rank {peer}")));
    }
    Ok((stream, peer))
}
