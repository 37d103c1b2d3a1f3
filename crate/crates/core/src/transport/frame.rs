//! Wire format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NZHA"
//! 4       1     msg_type (1=DATA 2=ACK 3=HEALTH 4=HANDOFF)
//! 5       4     op_seq       u32 LE
//! 9       4     chunk_index  u32 LE
//! 13      8     offset       u64 LE
//! 21      8     length       u64 LE
//! 29      len   payload
//! ```

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NZHA";
pub const HEADER_LEN: usize = 29;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Data = 1,
    Ack = 2,
    Health = 3,
    Handoff = 4,
}

/// `chunk_index` of a HEALTH frame announcing that the sender is leaving
/// cleanly; its link closing afterwards is not a failure.
pub const GOODBYE: u32 = u32::MAX;

impl TryFrom<u8> for MsgType {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(MsgType::Data),
            2 => Ok(MsgType::Ack),
            3 => Ok(MsgType::Health),
            4 => Ok(MsgType::Handoff),
            other => Err(Error::Protocol(format!("unknown msg_type {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub op_seq: u32,
    pub chunk_index: u32,
    pub offset: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn data(op_seq: u32, chunk_index: u32, offset: u64, payload: Vec<u8>) -> Self {
        Self { msg_type: MsgType::Data, op_seq, chunk_index, offset, payload }
    }

    pub fn control(msg_type: MsgType, op_seq: u32, chunk_index: u32, offset: u64) -> Self {
        Self { msg_type, op_seq, chunk_index, offset, payload: Vec::new() }
    }

    pub fn len(&self) -> u64 {
        self.payload.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn encode_header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4] = self.msg_type as u8;
        h[5..9].copy_from_slice(&self.op_seq.to_le_bytes());
        h[9..13].copy_from_slice(&self.chunk_index.to_le_bytes());
        h[13..21].copy_from_slice(&self.offset.to_le_bytes());
        h[21..29].copy_from_slice(&self.len().to_le_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.encode_header());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode_header())?;
        w.write_all(&self.payload)
    }

    /// Decodes one frame from the front of `buf`, returning it and the number
    /// of bytes consumed.
    pub fn decode(buf: &[u8], max_payload: usize) -> Result<(Frame, usize)> {
        if buf.len() < HEADER_LEN {
            return Err(Error::Protocol(format!("short header: {} bytes", buf.len())));
        }
        let header: &[u8; HEADER_LEN] = buf[..HEADER_LEN].try_into().expect("sized");
        let (mut frame, len) = Self::parse_header(header, max_payload)?;
        let end = HEADER_LEN + len;
        if buf.len() < end {
            return Err(Error::Protocol(format!(
                "truncated payload: want {len} bytes, have {}",
                buf.len() - HEADER_LEN
            )));
        }
        frame.payload = buf[HEADER_LEN..end].to_vec();
        Ok((frame, end))
    }

    /// Reads exactly one frame from a stream. A clean EOF before the first
    /// header byte surfaces as `UnexpectedEof`.
    pub fn read_from<R: Read>(r: &mut R, max_payload: usize) -> Result<Frame> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        let (mut frame, len) = Self::parse_header(&header, max_payload)?;
        frame.payload = vec![0u8; len];
        r.read_exact(&mut frame.payload)?;
        Ok(frame)
    }

    fn parse_header(h: &[u8; HEADER_LEN], max_payload: usize) -> Result<(Frame, usize)> {
        if h[0..4] != MAGIC {
            return Err(Error::Protocol(format!("bad magic {:02x?}", &h[0..4])));
        }
        let msg_type = MsgType::try_from(h[4])?;
        let op_seq = u32::from_le_bytes(h[5..9].try_into().expect("4 bytes"));
        let chunk_index = u32::from_le_bytes(h[9..13].try_into().expect("4 bytes"));
        let offset = u64::from_le_bytes(h[13..21].try_into().expect("8 bytes"));
        let length = u64::from_le_bytes(h[21..29].try_into().expect("8 bytes"));
        if length > max_payload as u64 {
            return Err(Error::Protocol(format!(
                "frame length {length} exceeds max payload {max_payload}"
            )));
        }
        let frame = Frame { msg_type, op_seq, chunk_index, offset, payload: Vec::new() };
        Ok((frame, length as usize))
    }
}

/// Splits one logical message into DATA frames of at most `max_payload`
/// bytes with consecutive chunk indices starting at `first_chunk`. An empty
/// message still produces one zero-length frame.
pub fn split_message(
    op_seq: u32,
    first_chunk: u32,
    offset: u64,
    bytes: &[u8],
    max_payload: usize,
) -> Vec<Frame> {
    if bytes.is_empty() {
        return vec![Frame::data(op_seq, first_chunk, offset, Vec::new())];
    }
    bytes
        .chunks(max_payload)
        .enumerate()
        .map(|(i, part)| {
            Frame::data(
                op_seq,
                first_chunk + i as u32,
                offset + (i * max_payload) as u64,
                part.to_vec(),
            )
        })
        .collect()
}

/// Number of frames [`split_message`] produces for `len` bytes.
pub fn frame_count(len: u64, max_payload: usize) -> u64 {
    len.div_ceil(max_payload as u64).max(1)
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f32s(bytes: &[u8], out: &mut [f32]) {
    debug_assert_eq!(bytes.len(), out.len() * 4);
    for (dst, src) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let f = Frame {
            msg_type: MsgType::Handoff,
            op_seq: 0x0102_0304,
            chunk_index: 5,
            offset: 0x1122_3344_5566_7788,
            payload: vec![0xAA, 0xBB],
        };
        let bytes = f.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 2);
        assert_eq!(&bytes[0..4], b"NZHA");
        assert_eq!(bytes[4], 4);
        assert_eq!(&bytes[5..9], &[4, 3, 2, 1]);
        assert_eq!(&bytes[9..13], &[5, 0, 0, 0]);
        assert_eq!(&bytes[13..21], &[0x88, 0x77, 0x66, 0x55, 0x44, 0x33, 0x22, 0x11]);
        assert_eq!(&bytes[21..29], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[29..], &[0xAA, 0xBB]);
    }

    #[test]
    fn empty_data_frame_round_trips() {
        let f = Frame::data(7, 0, 128, Vec::new());
        let (g, used) = Frame::decode(&f.encode(), 16).unwrap();
        assert_eq!(used, HEADER_LEN);
        assert_eq!(f, g);
    }

    #[test]
    fn wrong_magic_is_protocol_error() {
        let mut bytes = Frame::data(1, 0, 0, vec![1]).encode();
        bytes[0] = b'X';
        assert!(matches!(Frame::decode(&bytes, 16), Err(Error::Protocol(_))));
    }

    #[test]
    fn oversize_and_unknown_type_rejected() {
        let bytes = Frame::data(1, 0, 0, vec![0; 32]).encode();
        assert!(matches!(Frame::decode(&bytes, 16), Err(Error::Protocol(_))));
        let mut bytes = Frame::data(1, 0, 0, vec![]).encode();
        bytes[4] = 9;
        assert!(matches!(Frame::decode(&bytes, 16), Err(Error::Protocol(_))));
    }

    #[test]
    fn one_megabyte_in_64k_frames() {
        let payload = vec![0u8; 1 << 20];
        let frames = split_message(3, 10, 4096, &payload, 64 << 10);
        assert_eq!(frames.len(), 16);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f.chunk_index, 10 + i as u32);
            assert_eq!(f.offset, 4096 + (i as u64) * (64 << 10));
            assert_eq!(f.len(), 64 << 10);
        }
        assert_eq!(frame_count(1 << 20, 64 << 10), 16);
        assert_eq!(frame_count(0, 64 << 10), 1);
    }

    fn arb_type() -> impl Strategy<Value = MsgType> {
        prop_oneof![
            Just(MsgType::Data),
            Just(MsgType::Ack),
            Just(MsgType::Health),
            Just(MsgType::Handoff)
        ]
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            t in arb_type(),
            op in any::<u32>(),
            chunk in any::<u32>(),
            off in any::<u64>(),
            payload in proptest::collection::vec(any::<u8>(), 0..512),
        ) {
            let f = Frame { msg_type: t, op_seq: op, chunk_index: chunk, offset: off, payload };
            let bytes = f.encode();
            let (g, used) = Frame::decode(&bytes, 512).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(&g, &f);
            let h = Frame::read_from(&mut bytes.as_slice(), 512).unwrap();
            prop_assert_eq!(h, f);
        }

        #[test]
        fn float_bytes_round_trip(v in proptest::collection::vec(any::<f32>(), 0..64)) {
            let b = f32s_to_bytes(&v);
            let mut out = vec![0f32; v.len()];
            bytes_to_f32s(&b, &mut out);
            prop_assert_eq!(
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                out.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
