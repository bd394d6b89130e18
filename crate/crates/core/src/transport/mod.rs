//! Client/server message layer: the protocol message set, its byte-exact
//! frame encoding, and in-process and TCP endpoints.

mod endpoint;
mod frame;
mod message;

pub use endpoint::{channel_pair, stream_pair, ChannelEndpoint, Endpoint, StreamEndpoint, StreamListener};
pub use frame::{decode, decode_with_limit, encode, encode_checked, read_frame, DEFAULT_MAX_PAYLOAD, FRAME_MAGIC, FRAME_VERSION};
pub use message::{ProtocolMessage, WireDtype, WireTensor};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated frame: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload of {len} bytes exceeds limit {max}")]
    Oversize { len: usize, max: usize },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("peer disconnected")]
    Disconnected,
    #[error("i/o error: {0}")]
    Io(#[source] std::io::Error),
}

impl TransportError {
    pub(crate) fn from_io(e: std::io::Error) -> Self {
        use std::io::ErrorKind::*;
        match e.kind() {
            ConnectionRefused | ConnectionReset | ConnectionAborted | BrokenPipe | NotConnected | UnexpectedEof => {
                Self::Disconnected
            }
            _ => Self::Io(e),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Stream,
}
