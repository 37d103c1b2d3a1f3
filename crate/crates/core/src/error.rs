use std::io;

use crate::types::{RailId, Segment};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid rail profile: {0}")]
    InvalidProfile(String),

    #[error("degenerate profile: rail {0} has zero throughput")]
    DegenerateProfile(RailId),

    #[error("invalid telemetry: {0}")]
    InvalidTelemetry(String),

    #[error("channel down (rail {rail}, peer {peer})")]
    ChannelDown { rail: RailId, peer: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("receive timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("rendezvous timed out waiting for {missing} record(s)")]
    RendezvousTimeout { missing: usize },

    #[error("failed to bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },

    #[error("operation {op_seq} aborted on rail {rail} (segment {segment:?})")]
    OperationAborted {
        op_seq: u32,
        rail: RailId,
        segment: Segment,
    },

    #[error("no surviving rail can take over operation {op_seq}")]
    Unrecoverable { op_seq: u32 },

    #[error("rail {0} is unknown")]
    UnknownRail(RailId),

    #[error("readmission of rail {rail} rejected: {reason}")]
    ReadmitRejected { rail: RailId, reason: String },

    #[error("rail {0} already holds a compute grant")]
    GrantOutstanding(RailId),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors that mean a rail is unusable rather than misused.
    pub fn is_rail_failure(&self) -> bool {
        matches!(
            self,
            Error::ChannelDown { .. } | Error::OperationAborted { .. } | Error::Timeout(_)
        )
    }
}
