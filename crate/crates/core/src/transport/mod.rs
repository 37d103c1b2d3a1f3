//! Rails and channels: framing, pacing, rendezvous and mesh construction.

mod channel;
pub mod frame;
mod mesh;
pub mod rendezvous;
pub mod shaping;

pub use channel::{Channel, LinkId, SendHandle};
pub use frame::{Frame, MsgType};
pub use mesh::{memory_mesh, rendezvous, ConnectionSet, MeshOptions, TransportKind};
pub use rendezvous::{FileStore, MemoryStore, RendezvousRecord, RendezvousStore};
pub use shaping::Pacer;
