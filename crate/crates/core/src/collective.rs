//! Ring and pipelined ring allreduce over one rail.
//!
//! Both algorithms share one engine. The segment is cut into `N` blocks
//! (the last absorbs any remainder) and each block into chunks. A chunk is
//! forwarded to the next rank as soon as it has been reduced, so with more
//! than one chunk per block the transfer of chunk `k + 1` overlaps the
//! reduction of chunk `k`. Plain `Ring` is the one-chunk-per-block case.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::frame::{bytes_to_f32s, f32s_to_bytes, split_message};
use crate::transport::{Channel, ConnectionSet, SendHandle};
use crate::types::{RailId, ReduceOp, Segment, ELEMENT_BYTES};

pub const MIN_CHUNK_BYTES: u64 = 64 * 1024;
pub const OVERSIZE_LIMIT: u64 = 1 << 30;
pub const OVERSIZE_PIECE: u64 = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    Ring,
    RingChunked,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Algorithm::Ring),
            "ring-chunked" | "ring_chunked" => Ok(Algorithm::RingChunked),
            other => Err(Error::invalid(format!("unknown algorithm {other:?}"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Ring => "ring",
            Algorithm::RingChunked => "ring-chunked",
        })
    }
}

/// Default pipelining chunk: `segment / (2N)` with a 64 KiB floor.
pub fn default_chunk_bytes(segment_len: u64, node_count: usize) -> u64 {
    let raw = segment_len / (2 * node_count.max(1) as u64);
    let c = raw.max(MIN_CHUNK_BYTES);
    c - c % ELEMENT_BYTES
}

/// Splits payloads above 1 GiB into contiguous 256 MiB pieces.
pub fn split_oversized(payload: u64) -> Vec<Segment> {
    if payload <= OVERSIZE_LIMIT {
        return vec![Segment::new(0, payload)];
    }
    let pieces = payload.div_ceil(OVERSIZE_PIECE);
    (0..pieces)
        .map(|i| {
            let offset = i * OVERSIZE_PIECE;
            Segment::new(offset, OVERSIZE_PIECE.min(payload - offset))
        })
        .collect()
}

/// One rail's share of one operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpHandle {
    pub op_seq: u32,
    pub segment: Segment,
    pub rail: RailId,
    pub algorithm: Algorithm,
    pub reduce_op: ReduceOp,
    /// Overrides the default chunk for `RingChunked`.
    pub chunk_bytes: Option<u64>,
}

impl OpHandle {
    pub fn new(op_seq: u32, segment: Segment, rail: RailId, algorithm: Algorithm) -> Self {
        Self { op_seq, segment, rail, algorithm, reduce_op: ReduceOp::Sum, chunk_bytes: None }
    }

    pub fn with_chunk_bytes(mut self, bytes: u64) -> Self {
        self.chunk_bytes = Some(bytes);
        self
    }

    fn chunk_elems(&self, node_count: usize) -> Option<usize> {
        match self.algorithm {
            Algorithm::Ring => None,
            Algorithm::RingChunked => {
                let bytes = self.chunk_bytes.unwrap_or_else(|| default_chunk_bytes(self.segment.len, node_count));
                Some(((bytes / ELEMENT_BYTES) as usize).max(1))
            }
        }
    }

    fn aborted(&self) -> Error {
        Error::OperationAborted { op_seq: self.op_seq, rail: self.rail, segment: self.segment }
    }
}

/// Shared reduction buffer handed out to rail executors as disjoint slices.
#[derive(Debug)]
pub struct UnboundBuffer<'a> {
    data: &'a mut [f32],
}

/// Counts rail executors that have finished with their slice.
#[derive(Debug, Default)]
pub struct Completion {
    completed: AtomicUsize,
    participants: usize,
}

impl Completion {
    pub fn complete_one(&self) {
        self.completed.fetch_add(1, Ordering::SeqCst);
    }

    pub fn completed(&self) -> usize {
        self.completed.load(Ordering::SeqCst)
    }

    /// True once every bound rail has reported completion.
    pub fn is_released(&self) -> bool {
        self.completed() == self.participants
    }
}

impl<'a> UnboundBuffer<'a> {
    pub fn new(data: &'a mut [f32]) -> Self {
        Self { data }
    }

    pub fn byte_len(&self) -> u64 {
        self.data.len() as u64 * ELEMENT_BYTES
    }

    /// Splits the buffer along `segments`, which must cover it exactly and be
    /// element aligned. Slices are returned in the order of `segments`.
    pub fn bind(self, segments: &[Segment]) -> Result<(Vec<&'a mut [f32]>, Completion)> {
        Segment::check_cover(segments, self.byte_len())?;
        if segments.iter().any(|s| s.offset % ELEMENT_BYTES != 0 || s.len % ELEMENT_BYTES != 0) {
            return Err(Error::invalid("segments must be element aligned"));
        }
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.sort_by_key(|&i| segments[i].offset);
        let mut slots: Vec<Option<&'a mut [f32]>> = (0..segments.len()).map(|_| None).collect();
        let mut rest: &'a mut [f32] = self.data;
        for i in order {
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(segments[i].elements().len());
            slots[i] = Some(head);
            rest = tail;
        }
        let slices = slots.into_iter().map(|s| s.expect("every segment bound")).collect();
        Ok((slices, Completion { completed: AtomicUsize::new(0), participants: segments.len() }))
    }
}

/// Environment for one executor.
#[derive(Debug, Clone, Copy)]
pub struct RingContext<'a> {
    pub conns: &'a ConnectionSet,
    /// Set by the owner to abandon the operation.
    pub abort: Option<&'a AtomicBool>,
    /// Longest wait without any frame arriving.
    pub stall_timeout: Duration,
}

impl<'a> RingContext<'a> {
    pub fn new(conns: &'a ConnectionSet) -> Self {
        Self { conns, abort: None, stall_timeout: Duration::from_secs(30) }
    }

    pub fn with_abort(mut self, abort: &'a AtomicBool) -> Self {
        self.abort = Some(abort);
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RingStats {
    pub bytes_sent: u64,
    pub frames_sent: u64,
}

/// Sum-allreduces `data` (the elements of `handle.segment`) with every rank.
pub fn ring_allreduce(handle: &OpHandle, data: &mut [f32], ctx: &RingContext<'_>) -> Result<RingStats> {
    let expected = handle.segment.elements().len();
    if data.len() != expected {
        return Err(Error::invalid(format!("segment holds {expected} elements, buffer slice {}", data.len())));
    }
    let n = ctx.conns.world_size();
    let rank = ctx.conns.rank();
    let next = ctx.conns.channel(handle.rail, (rank + 1) % n).ok_or(Error::UnknownRail(handle.rail))?;
    let prev = ctx.conns.channel(handle.rail, (rank + n - 1) % n).ok_or(Error::UnknownRail(handle.rail))?;
    let mut engine = Engine::new(handle, ctx, next, prev, data.len(), n);
    let result = engine.run(data, rank);
    match result {
        Ok(()) => Ok(engine.stats),
        Err(e) if e.is_rail_failure() => Err(handle.aborted()),
        Err(e) => Err(e),
    }
}

struct Engine<'a> {
    handle: &'a OpHandle,
    ctx: &'a RingContext<'a>,
    next: &'a Channel,
    prev: &'a Channel,
    n: usize,
    elems: usize,
    chunk: Option<usize>,
    frame_elems: usize,
    send_idx: u32,
    recv_idx: u32,
    pending: Vec<SendHandle>,
    stats: RingStats,
}

impl<'a> Engine<'a> {
    fn new(handle: &'a OpHandle, ctx: &'a RingContext<'a>, next: &'a Channel, prev: &'a Channel, elems: usize, n: usize) -> Self {
        let frame_elems = (next.max_frame_payload() / ELEMENT_BYTES as usize).max(1);
        Self {
            handle,
            ctx,
            next,
            prev,
            n,
            elems,
            chunk: handle.chunk_elems(n),
            frame_elems,
            send_idx: 0,
            recv_idx: 0,
            pending: Vec::new(),
            stats: RingStats::default(),
        }
    }

    fn block(&self, b: usize) -> std::ops::Range<usize> {
        let base = self.elems / self.n;
        let start = b * base;
        let end = if b + 1 == self.n { self.elems } else { start + base };
        start..end
    }

    fn chunks(&self, b: usize) -> Vec<std::ops::Range<usize>> {
        let block = self.block(b);
        let step = self.chunk.unwrap_or(block.len()).max(1);
        (block.start..block.end).step_by(step).map(|s| s..(s + step).min(block.end)).collect()
    }

    fn send_block(&self, rank: usize, g: usize) -> usize {
        let n = self.n;
        if g < n - 1 {
            (rank + n - g % n) % n
        } else {
            (rank + 1 + n - (g - (n - 1)) % n) % n
        }
    }

    fn recv_block(&self, rank: usize, g: usize) -> usize {
        let n = self.n;
        if g < n - 1 {
            (rank + 2 * n - g - 1) % n
        } else {
            (rank + n - (g - (n - 1)) % n) % n
        }
    }

    fn byte_offset(&self, elem: usize) -> u64 {
        self.handle.segment.offset + elem as u64 * ELEMENT_BYTES
    }

    fn send(&mut self, data: &[f32], range: std::ops::Range<usize>) {
        let bytes = f32s_to_bytes(&data[range.clone()]);
        let frames = split_message(
            self.handle.op_seq,
            self.send_idx,
            self.byte_offset(range.start),
            &bytes,
            self.frame_elems * ELEMENT_BYTES as usize,
        );
        self.send_idx += frames.len() as u32;
        self.stats.frames_sent += frames.len() as u64;
        self.stats.bytes_sent += bytes.len() as u64;
        self.pending.push(self.next.send(frames));
    }

    fn recv_into(&mut self, data: &mut [f32], range: std::ops::Range<usize>, reduce: bool) -> Result<()> {
        let mut cursor = range.start;
        let mut scratch = Vec::new();
        loop {
            let f = self.recv_frame()?;
            let want_offset = self.byte_offset(cursor);
            if f.chunk_index != self.recv_idx || f.offset != want_offset {
                return Err(Error::Protocol(format!(
                    "op {} rail {}: expected chunk {} at offset {}, got chunk {} at offset {}",
                    self.handle.op_seq, self.handle.rail, self.recv_idx, want_offset, f.chunk_index, f.offset
                )));
            }
            let count = f.payload.len() / ELEMENT_BYTES as usize;
            if f.payload.len() % ELEMENT_BYTES as usize != 0 || cursor + count > range.end {
                return Err(Error::Protocol(format!("frame of {} bytes overruns chunk", f.payload.len())));
            }
            self.recv_idx += 1;
            let dst = &mut data[cursor..cursor + count];
            if reduce {
                scratch.resize(count, 0.0);
                bytes_to_f32s(&f.payload, &mut scratch);
                self.handle.reduce_op.apply(dst, &scratch);
            } else {
                bytes_to_f32s(&f.payload, dst);
            }
            cursor += count;
            if cursor == range.end {
                return Ok(());
            }
        }
    }

    fn recv_frame(&self) -> Result<crate::transport::Frame> {
        let poll = Duration::from_millis(2);
        let mut last_progress = Instant::now();
        loop {
            if self.ctx.abort.is_some_and(|a| a.load(Ordering::SeqCst)) {
                return Err(self.handle.aborted());
            }
            match self.prev.recv(poll) {
                Ok(f) if f.op_seq < self.handle.op_seq => {
                    last_progress = Instant::now();
                }
                Ok(f) if f.op_seq > self.handle.op_seq => {
                    return Err(Error::Protocol(format!(
                        "rail {}: received op {} while running op {}",
                        self.handle.rail, f.op_seq, self.handle.op_seq
                    )));
                }
                Ok(f) => return Ok(f),
                Err(Error::Timeout(_)) => {
                    if last_progress.elapsed() > self.ctx.stall_timeout {
                        return Err(Error::Timeout(self.ctx.stall_timeout));
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn run(&mut self, data: &mut [f32], rank: usize) -> Result<()> {
        let steps = 2 * (self.n - 1);
        let first = self.send_block(rank, 0);
        for c in self.chunks(first) {
            self.send(data, c);
        }
        for g in 0..steps {
            let b = self.recv_block(rank, g);
            debug_assert!(g + 1 == steps || self.send_block(rank, g + 1) == b);
            for c in self.chunks(b) {
                self.recv_into(data, c.clone(), g < self.n - 1)?;
                if g + 1 < steps {
                    self.send(data, c);
                }
            }
        }
        for h in self.pending.drain(..) {
            h.wait()?;
        }
        Ok(())
    }
}
