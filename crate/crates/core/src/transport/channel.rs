//! Point-to-point channels.
//!
//! Every channel owns two workers. The writer drains a FIFO of queued
//! messages (pacing them when the rail is shaped) and interleaves HEALTH
//! frames between data frames so heartbeats never wait behind a large
//! transfer. The reader demultiplexes incoming frames: heartbeats update the
//! channel's liveness clock, everything else is queued for the consumer.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{self as cb, select, Receiver, RecvTimeoutError, Sender, TryRecvError};

use super::frame::{split_message, Frame, MsgType, GOODBYE};
use super::shaping::{sleep_until, Pacer};
use crate::error::{Error, Result};
use crate::types::RailId;

/// Identifies the physical endpoint a channel rides on. Channels that share
/// a `LinkId` share that link's pacer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId {
    pub rank: usize,
    pub rail: RailId,
    pub index: u16,
}

pub(crate) trait FrameSink: Send {
    fn write_frame(&mut self, frame: Frame) -> io::Result<()>;
    fn flush(&mut self) -> io::Result<()>;
}

pub(crate) trait FrameSource: Send {
    fn read_frame(&mut self) -> Result<Frame>;
}

/// Tears down both directions of the underlying stream.
pub(crate) trait Closer: Send + Sync {
    fn close(&self);
}

/// Completion of one queued message.
#[derive(Debug)]
pub struct SendHandle {
    rx: Receiver<Result<()>>,
    rail: RailId,
    peer: usize,
}

impl SendHandle {
    pub fn wait(self) -> Result<()> {
        self.rx
            .recv()
            .unwrap_or(Err(Error::ChannelDown { rail: self.rail, peer: self.peer }))
    }

    pub fn wait_timeout(&self, timeout: Duration) -> Option<Result<()>> {
        match self.rx.recv_timeout(timeout) {
            Ok(r) => Some(r),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => {
                Some(Err(Error::ChannelDown { rail: self.rail, peer: self.peer }))
            }
        }
    }

    pub fn try_result(&self) -> Option<Result<()>> {
        match self.rx.try_recv() {
            Ok(r) => Some(r),
            Err(TryRecvError::Empty) => None,
            Err(TryRecvError::Disconnected) => {
                Some(Err(Error::ChannelDown { rail: self.rail, peer: self.peer }))
            }
        }
    }
}

struct Outgoing {
    frames: Vec<Frame>,
    enqueued: Instant,
    done: Sender<Result<()>>,
}

enum Inbound {
    Frame(Frame),
    Down,
}

/// Scripted faults applied by the writer worker.
#[derive(Debug, Default)]
struct FaultScript {
    /// Close the link when this many more DATA frames have been written.
    close_after: Mutex<Option<u64>>,
    paused: AtomicBool,
}

struct ChannelShared {
    rail: RailId,
    peer: usize,
    down: AtomicBool,
    down_reason: Mutex<Option<String>>,
    bytes_sent: AtomicU64,
    frames_sent: AtomicU64,
    bytes_received: AtomicU64,
    last_heartbeat: Mutex<Instant>,
    /// Rail named by the latest HANDOFF notice, plus one; zero when none.
    handoff_notice: AtomicU64,
    /// The peer said goodbye before its link closed.
    departed: AtomicBool,
    faults: FaultScript,
    closer: Box<dyn Closer>,
}

impl ChannelShared {
    fn mark_down(&self, reason: Option<String>) {
        if let Some(r) = reason {
            let mut slot = self.down_reason.lock().expect("reason lock");
            if slot.is_none() {
                *slot = Some(r);
            }
        }
        if !self.down.swap(true, Ordering::SeqCst) {
            self.closer.close();
        }
    }

    fn down_error(&self) -> Error {
        match self.down_reason.lock().expect("reason lock").clone() {
            Some(reason) => Error::Protocol(reason),
            None => Error::ChannelDown { rail: self.rail, peer: self.peer },
        }
    }
}

/// One bidirectional stream between this rank and `peer` on one rail.
///
/// DATA frames and ACK frames are queued separately so a
/// control exchange never has to step over payload belonging to a later
/// operation.
pub struct Channel {
    pub rail: RailId,
    pub peer: usize,
    pub link: LinkId,
    max_frame_payload: usize,
    out_tx: Sender<Outgoing>,
    health_tx: Sender<Frame>,
    data_rx: Receiver<Inbound>,
    ctrl_rx: Receiver<Inbound>,
    shared: Arc<ChannelShared>,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("rail", &self.rail)
            .field("peer", &self.peer)
            .field("link", &self.link)
            .field("down", &self.is_down())
            .finish()
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        self.shared.mark_down(None);
    }
}

pub(crate) struct Endpoint {
    pub sink: Box<dyn FrameSink>,
    pub source: Box<dyn FrameSource>,
    pub closer: Box<dyn Closer>,
}

impl Channel {
    pub(crate) fn spawn(
        rail: RailId,
        peer: usize,
        link: LinkId,
        max_frame_payload: usize,
        endpoint: Endpoint,
        pacer: Option<Arc<Pacer>>,
    ) -> Channel {
        let Endpoint { sink, source, closer } = endpoint;
        let (out_tx, out_rx) = cb::unbounded::<Outgoing>();
        let (health_tx, health_rx) = cb::unbounded::<Frame>();
        let (data_tx, data_rx) = cb::unbounded::<Inbound>();
        let (ctrl_tx, ctrl_rx) = cb::unbounded::<Inbound>();
        let shared = Arc::new(ChannelShared {
            rail,
            peer,
            down: AtomicBool::new(false),
            down_reason: Mutex::new(None),
            bytes_sent: AtomicU64::new(0),
            frames_sent: AtomicU64::new(0),
            bytes_received: AtomicU64::new(0),
            last_heartbeat: Mutex::new(Instant::now()),
            handoff_notice: AtomicU64::new(0),
            departed: AtomicBool::new(false),
            faults: FaultScript::default(),
            closer,
        });
        let pacer = pacer.filter(|p| !p.is_identity());

        let ws = Arc::clone(&shared);
        thread::Builder::new()
            .name(format!("nezha-w{rail}-{peer}"))
            .spawn(move || writer_loop(ws, sink, out_rx, health_rx, pacer))
            .expect("spawn writer");
        let rs = Arc::clone(&shared);
        thread::Builder::new()
            .name(format!("nezha-r{rail}-{peer}"))
            .spawn(move || reader_loop(rs, source, data_tx, ctrl_tx))
            .expect("spawn reader");

        Channel { rail, peer, link, max_frame_payload, out_tx, health_tx, data_rx, ctrl_rx, shared }
    }

    pub fn max_frame_payload(&self) -> usize {
        self.max_frame_payload
    }

    /// Queues one message made of `frames`. Never blocks.
    pub fn send(&self, frames: Vec<Frame>) -> SendHandle {
        let (done, rx) = cb::bounded(1);
        let handle = SendHandle { rx, rail: self.rail, peer: self.peer };
        if self.is_down() {
            let _ = done.send(Err(self.shared.down_error()));
            return handle;
        }
        let msg = Outgoing { frames, enqueued: Instant::now(), done };
        if let Err(cb::SendError(msg)) = self.out_tx.send(msg) {
            let _ = msg.done.send(Err(self.shared.down_error()));
        }
        handle
    }

    pub fn send_frame(&self, frame: Frame) -> SendHandle {
        self.send(vec![frame])
    }

    /// Splits `bytes` into DATA frames and queues them as one message.
    pub fn send_message(&self, op_seq: u32, first_chunk: u32, offset: u64, bytes: &[u8]) -> SendHandle {
        self.send(split_message(op_seq, first_chunk, offset, bytes, self.max_frame_payload))
    }

    /// Receives the next DATA frame. Frames that arrived before the channel
    /// went down are still delivered in order.
    pub fn recv(&self, timeout: Duration) -> Result<Frame> {
        self.pop(&self.data_rx, timeout)
    }

    /// Receives the next ACK frame.
    pub fn recv_control(&self, timeout: Duration) -> Result<Frame> {
        self.pop(&self.ctrl_rx, timeout)
    }

    /// Non-blocking variant of [`Self::recv_control`].
    pub fn try_recv_control(&self) -> Result<Option<Frame>> {
        match self.ctrl_rx.try_recv() {
            Ok(Inbound::Frame(f)) => Ok(Some(f)),
            Ok(Inbound::Down) | Err(TryRecvError::Disconnected) => Err(self.shared.down_error()),
            Err(TryRecvError::Empty) if self.is_down() && self.ctrl_rx.is_empty() => {
                Err(self.shared.down_error())
            }
            Err(TryRecvError::Empty) => Ok(None),
        }
    }

    fn pop(&self, rx: &Receiver<Inbound>, timeout: Duration) -> Result<Frame> {
        match rx.try_recv() {
            Ok(Inbound::Frame(f)) => return Ok(f),
            Ok(Inbound::Down) => return Err(self.shared.down_error()),
            Err(_) if self.is_down() => return Err(self.shared.down_error()),
            Err(_) => {}
        }
        match rx.recv_timeout(timeout) {
            Ok(Inbound::Frame(f)) => Ok(f),
            Ok(Inbound::Down) => Err(self.shared.down_error()),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(self.shared.down_error()),
        }
    }

    /// Sends a heartbeat ahead of any queued data.
    pub fn send_health(&self, epoch: u32) {
        if !self.is_down() {
            let _ = self.health_tx.send(Frame::control(MsgType::Health, epoch, 0, 0));
        }
    }

    /// Tells the peer that `failed` is no longer usable. Jumps the data queue.
    pub fn send_handoff_notice(&self, failed: RailId) {
        if !self.is_down() {
            let _ = self.health_tx.send(Frame::control(MsgType::Handoff, 0, failed.0 as u32, 0));
        }
    }

    /// Takes the rail named by the last HANDOFF notice received, if any.
    pub fn take_handoff_notice(&self) -> Option<RailId> {
        match self.shared.handoff_notice.swap(0, Ordering::SeqCst) {
            0 => None,
            r => Some(RailId((r - 1) as u16)),
        }
    }

    pub fn close(&self) {
        self.shared.mark_down(None);
    }

    pub fn is_down(&self) -> bool {
        self.shared.down.load(Ordering::SeqCst)
    }

    /// Down for a reason other than the peer leaving cleanly.
    pub fn has_failed(&self) -> bool {
        self.is_down() && !self.departed()
    }

    pub fn departed(&self) -> bool {
        self.shared.departed.load(Ordering::SeqCst)
    }

    /// Queues a goodbye behind everything already sent.
    pub fn send_goodbye(&self) -> SendHandle {
        self.send(vec![Frame::control(MsgType::Health, 0, GOODBYE, 0)])
    }

    pub fn bytes_sent(&self) -> u64 {
        self.shared.bytes_sent.load(Ordering::Relaxed)
    }

    pub fn frames_sent(&self) -> u64 {
        self.shared.frames_sent.load(Ordering::Relaxed)
    }

    pub fn bytes_received(&self) -> u64 {
        self.shared.bytes_received.load(Ordering::Relaxed)
    }

    pub fn last_heartbeat(&self) -> Instant {
        *self.shared.last_heartbeat.lock().expect("heartbeat lock")
    }

    /// Closes the link instead of writing the `frames`-th DATA frame from
    /// now; the completion of the message carrying it reports channel-down.
    /// `frames == 1` fails the very next DATA frame.
    pub fn inject_close_at(&self, frames: u64) {
        *self.shared.faults.close_after.lock().expect("fault lock") = Some(frames.max(1));
    }

    /// Holds every outgoing frame, heartbeats included, until [`Self::resume`].
    pub fn pause(&self) {
        self.shared.faults.paused.store(true, Ordering::SeqCst);
    }

    pub fn resume(&self) {
        self.shared.faults.paused.store(false, Ordering::SeqCst);
    }
}

fn write_health(shared: &ChannelShared, sink: &mut dyn FrameSink, frame: Frame) -> bool {
    if shared.faults.paused.load(Ordering::SeqCst) {
        return true;
    }
    let ok = sink.write_frame(frame).and_then(|_| sink.flush()).is_ok();
    if !ok {
        shared.mark_down(None);
    }
    ok
}

fn wait_while_paused(shared: &ChannelShared) -> bool {
    while shared.faults.paused.load(Ordering::SeqCst) {
        if shared.down.load(Ordering::SeqCst) {
            return false;
        }
        thread::sleep(Duration::from_millis(1));
    }
    !shared.down.load(Ordering::SeqCst)
}

fn writer_loop(
    shared: Arc<ChannelShared>,
    mut sink: Box<dyn FrameSink>,
    out_rx: Receiver<Outgoing>,
    health_rx: Receiver<Frame>,
    pacer: Option<Arc<Pacer>>,
) {
    loop {
        let msg = select! {
            recv(health_rx) -> hb => {
                match hb {
                    Ok(frame) => { write_health(&shared, sink.as_mut(), frame); continue; }
                    Err(_) => return,
                }
            }
            recv(out_rx) -> msg => match msg {
                Ok(m) => m,
                Err(_) => return,
            }
        };
        let result = write_message(&shared, sink.as_mut(), &health_rx, pacer.as_deref(), msg.frames, msg.enqueued);
        let _ = msg.done.send(result);
    }
}

fn write_message(
    shared: &ChannelShared,
    sink: &mut dyn FrameSink,
    health_rx: &Receiver<Frame>,
    pacer: Option<&Pacer>,
    frames: Vec<Frame>,
    enqueued: Instant,
) -> Result<()> {
    let down = || Err(shared.down_error());
    if shared.down.load(Ordering::SeqCst) {
        return down();
    }
    let total: u64 = frames.iter().map(Frame::len).sum();
    let ready = pacer.map(|p| enqueued + p.setup_delay(total));
    for frame in frames {
        while let Ok(hb) = health_rx.try_recv() {
            write_health(shared, sink, hb);
        }
        if let (Some(p), Some(ready)) = (pacer, ready) {
            let release = p.reserve(ready, frame.len());
            // Keep heartbeats flowing during long waits.
            while Instant::now() + Duration::from_millis(5) < release {
                thread::sleep(Duration::from_millis(4));
                while let Ok(hb) = health_rx.try_recv() {
                    write_health(shared, sink, hb);
                }
            }
            sleep_until(release);
        }
        if !wait_while_paused(shared) {
            return down();
        }
        let is_data = frame.msg_type == MsgType::Data;
        let len = frame.len();
        if is_data {
            let mut close_after = shared.faults.close_after.lock().expect("fault lock");
            if let Some(left) = close_after.as_mut() {
                *left -= 1;
                if *left == 0 {
                    *close_after = None;
                    drop(close_after);
                    shared.mark_down(None);
                    return down();
                }
            }
        }
        if sink.write_frame(frame).is_err() {
            shared.mark_down(None);
            return down();
        }
        shared.frames_sent.fetch_add(1, Ordering::Relaxed);
        if is_data {
            shared.bytes_sent.fetch_add(len, Ordering::Relaxed);
        }
    }
    if sink.flush().is_err() {
        shared.mark_down(None);
        return down();
    }
    Ok(())
}

fn reader_loop(
    shared: Arc<ChannelShared>,
    mut source: Box<dyn FrameSource>,
    data_tx: Sender<Inbound>,
    ctrl_tx: Sender<Inbound>,
) {
    loop {
        match source.read_frame() {
            Ok(frame) => match frame.msg_type {
                MsgType::Health if frame.chunk_index == GOODBYE => {
                    shared.departed.store(true, Ordering::SeqCst);
                }
                MsgType::Health => {
                    *shared.last_heartbeat.lock().expect("heartbeat lock") = Instant::now();
                }
                MsgType::Data => {
                    shared.bytes_received.fetch_add(frame.len(), Ordering::Relaxed);
                    if data_tx.send(Inbound::Frame(frame)).is_err() {
                        return;
                    }
                }
                MsgType::Handoff => {
                    shared.handoff_notice.store(frame.chunk_index as u64 + 1, Ordering::SeqCst);
                }
                MsgType::Ack => {
                    if ctrl_tx.send(Inbound::Frame(frame)).is_err() {
                        return;
                    }
                }
            },
            Err(err) => {
                let reason = match err {
                    Error::Protocol(reason) => Some(reason),
                    _ => None,
                };
                shared.mark_down(reason);
                let _ = data_tx.send(Inbound::Down);
                let _ = ctrl_tx.send(Inbound::Down);
                return;
            }
        }
    }
}

// ---------------------------------------------------------------- TCP ---

pub(crate) struct TcpSink(pub BufWriter<TcpStream>);
pub(crate) struct TcpSource {
    pub reader: BufReader<TcpStream>,
    pub max_payload: usize,
}
pub(crate) struct TcpCloser(pub TcpStream);

impl FrameSink for TcpSink {
    fn write_frame(&mut self, frame: Frame) -> io::Result<()> {
        frame.write_to(&mut self.0)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()
    }
}

impl FrameSource for TcpSource {
    fn read_frame(&mut self) -> Result<Frame> {
        Frame::read_from(&mut self.reader, self.max_payload)
    }
}

impl Closer for TcpCloser {
    fn close(&self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

/// Wraps a connected stream in a channel.
pub(crate) fn tcp_channel(
    stream: TcpStream,
    rail: RailId,
    peer: usize,
    link: LinkId,
    max_frame_payload: usize,
    pacer: Option<Arc<Pacer>>,
) -> io::Result<Channel> {
    stream.set_nodelay(true)?;
    let reader = BufReader::with_capacity(256 << 10, stream.try_clone()?);
    let writer = BufWriter::with_capacity(256 << 10, stream.try_clone()?);
    Ok(Channel::spawn(
        rail,
        peer,
        link,
        max_frame_payload,
        Endpoint {
            sink: Box::new(TcpSink(writer)),
            source: Box::new(TcpSource { reader, max_payload: max_frame_payload }),
            closer: Box::new(TcpCloser(stream)),
        },
        pacer,
    ))
}

// ------------------------------------------------------------- memory ---

struct MemSink {
    tx: Sender<Frame>,
    closed: Arc<AtomicBool>,
}

struct MemSource {
    rx: Receiver<Frame>,
    /// Disconnects when the link is closed.
    close_rx: Receiver<()>,
}

struct MemCloser {
    closed: Arc<AtomicBool>,
    close_tx: Arc<Mutex<Option<Sender<()>>>>,
}

impl FrameSink for MemSink {
    fn write_frame(&mut self, frame: Frame) -> io::Result<()> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(io::ErrorKind::BrokenPipe.into());
        }
        self.tx.send(frame).map_err(|_| io::ErrorKind::BrokenPipe.into())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl FrameSource for MemSource {
    fn read_frame(&mut self) -> Result<Frame> {
        let eof = || Error::Io(io::ErrorKind::UnexpectedEof.into());
        select! {
            recv(self.rx) -> f => f.map_err(|_| eof()),
            // Frames sent before the close are still delivered.
            recv(self.close_rx) -> _ => self.rx.try_recv().map_err(|_| eof()),
        }
    }
}

impl Closer for MemCloser {
    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.close_tx.lock().expect("close lock").take();
    }
}

/// Builds the two ends of an in-memory link between ranks `a` and `b`.
pub(crate) fn memory_pair(
    rail: RailId,
    (a, link_a): (usize, LinkId),
    (b, link_b): (usize, LinkId),
    max_frame_payload: usize,
    pacers: (Option<Arc<Pacer>>, Option<Arc<Pacer>>),
) -> (Channel, Channel) {
    let closed = Arc::new(AtomicBool::new(false));
    let (close_tx, close_rx) = cb::bounded::<()>(0);
    let close_tx = Arc::new(Mutex::new(Some(close_tx)));
    let (a_to_b, b_from_a) = cb::unbounded();
    let (b_to_a, a_from_b) = cb::unbounded();
    let endpoint = |tx, rx| Endpoint {
        sink: Box::new(MemSink { tx, closed: Arc::clone(&closed) }),
        source: Box::new(MemSource { rx, close_rx: close_rx.clone() }),
        closer: Box::new(MemCloser { closed: Arc::clone(&closed), close_tx: Arc::clone(&close_tx) }),
    };
    let at_a = Channel::spawn(rail, b, link_a, max_frame_payload, endpoint(a_to_b, a_from_b), pacers.0);
    let at_b = Channel::spawn(rail, a, link_b, max_frame_payload, endpoint(b_to_a, b_from_a), pacers.1);
    (at_a, at_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (Channel, Channel) {
        let rail = RailId(0);
        memory_pair(
            rail,
            (0, LinkId { rank: 0, rail, index: 0 }),
            (1, LinkId { rank: 1, rail, index: 0 }),
            16,
            (None, None),
        )
    }

    const T: Duration = Duration::from_secs(2);

    #[test]
    fn echo_preserves_frames() {
        let (a, b) = pair();
        let f = Frame::data(4, 0, 8, vec![1, 2, 3]);
        a.send_frame(f.clone()).wait().unwrap();
        assert_eq!(b.recv(T).unwrap(), f);
        assert_eq!(a.bytes_sent(), 3);
        assert_eq!(b.bytes_received(), 3);
    }

    #[test]
    fn scripted_close_fails_third_frame() {
        let (a, b) = pair();
        a.inject_close_at(3);
        a.send_frame(Frame::data(1, 0, 0, vec![0])).wait().unwrap();
        a.send_frame(Frame::data(1, 1, 0, vec![0])).wait().unwrap();
        let third = a.send_frame(Frame::data(1, 2, 0, vec![0])).wait();
        assert!(matches!(third, Err(Error::ChannelDown { .. })));
        // The two delivered frames remain readable, then the peer sees down.
        assert_eq!(b.recv(T).unwrap().chunk_index, 0);
        assert_eq!(b.recv(T).unwrap().chunk_index, 1);
        assert!(matches!(b.recv(T), Err(Error::ChannelDown { .. })));
        assert!(a.is_down());
    }

    #[test]
    fn heartbeats_are_consumed_by_reader() {
        let (a, b) = pair();
        let before = b.last_heartbeat();
        thread::sleep(Duration::from_millis(5));
        a.send_health(0);
        let deadline = Instant::now() + T;
        while b.last_heartbeat() == before && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(1));
        }
        assert!(b.last_heartbeat() > before);
        assert!(matches!(b.recv(Duration::from_millis(20)), Err(Error::Timeout(_))));
    }

    #[test]
    fn pause_holds_frames() {
        let (a, b) = pair();
        a.pause();
        let h = a.send_frame(Frame::data(1, 0, 0, vec![9]));
        assert!(matches!(b.recv(Duration::from_millis(30)), Err(Error::Timeout(_))));
        a.resume();
        h.wait().unwrap();
        assert_eq!(b.recv(T).unwrap().payload, vec![9]);
    }

    #[test]
    fn goodbye_is_not_a_failure() {
        let (a, b) = pair();
        a.send_frame(Frame::control(MsgType::Ack, 7, 0, 0));
        a.send_goodbye().wait().unwrap();
        drop(a);
        assert_eq!(b.recv_control(T).unwrap().op_seq, 7);
        assert!(matches!(b.recv(T), Err(Error::ChannelDown { .. })));
        assert!(b.is_down() && b.departed() && !b.has_failed());
    }

    #[test]
    fn send_after_close_reports_down() {
        let (a, _b) = pair();
        a.close();
        assert!(a.send_frame(Frame::data(1, 0, 0, vec![])).wait().is_err());
    }
}
