//! Client dispatch backends: a binary frame protocol over TCP and an
//! in-process loopback that pushes the same frames through memory.

mod loopback;
mod tcp;
mod wire;

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::federation::FedError;
use crate::models::ModelWeights;

pub use loopback::LoopbackDispatch;
pub use tcp::{
    client_run, serve, ClientOptions, ClientSummary, Direction, RetryPolicy, ServerOptions, TcpDispatch, TranscriptEntry,
    DEFAULT_ROUND_TIMEOUT,
};
pub use wire::{
    decode_frame, decode_message, decode_weights_file, encode_message, encode_weights_file, read_message,
    write_message, Message, MessageKind, DTYPE_F32, FRAME_HEADER_LEN, FRAME_MAGIC, MAX_PAYLOAD, WEIGHTS_FILE_MAGIC,
};

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("CRC mismatch: stored {expected:#010x}, computed {actual:#010x}")]
    Crc { expected: u32, actual: u32 },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("too large for the wire format: {0}")]
    TooLarge(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<WireError> for FedError {
    fn from(e: WireError) -> Self {
        FedError::Transport(e.to_string())
    }
}

/// Writes weights as a `.flw` file.
pub fn save_weights(path: &Path, weights: &ModelWeights) -> Result<(), WireError> {
    fs::write(path, encode_weights_file(weights)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelWeights, WireError> {
    decode_weights_file(&fs::read(path)?)
}
