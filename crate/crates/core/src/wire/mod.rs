//! Framed binary protocol for delegating noise prediction (and latent
//! encode/decode, OCR and CLIP scoring) to an external denoiser service.
//!
//! A frame is `"DTXT" | version u8 | msg_type u8 | header_len u32 | JSON
//! header | payload_len u64 | payload`, all integers little-endian. The
//! header carries the operation, the request id and a `tensors` list of
//! descriptors pointing into the payload in order.

mod client;
mod frame;
mod server;

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::Branches;

pub use client::{Client, ClientOptions, RemoteDenoiser};
pub use frame::{
    decode_frame, encode_frame, read_frame, write_frame, DType, Frame, MsgType, Tensor, TensorDescriptor,
    MAGIC, MAX_HEADER_LEN, MAX_PAYLOAD_LEN, VERSION,
};
pub use server::{serve_connection, EpsMode, Fault, LoopbackConfig, LoopbackServer, LoopbackState};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error at byte {offset}: {reason}")]
    Protocol { offset: usize, reason: String },
    #[error("bad tensor: {0}")]
    BadTensor(String),
    #[error("malformed {what}: {reason}")]
    Malformed { what: &'static str, reason: String },
    #[error("connection closed")]
    Closed,
    #[error("{op} timed out after {after:?}")]
    Timeout { op: String, after: Duration },
    #[error("response id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("response shape {got:?} does not match request shape {expected:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("server error [{code}]: {message}")]
    Remote { code: String, message: String },
    #[error("server does not support {0}")]
    Unsupported(String),
    #[error("gave up after {attempts} attempts: {source}")]
    RetriesExhausted {
        attempts: u32,
        #[source]
        source: Box<WireError>,
    },
}

impl WireError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, WireError::Timeout { .. })
    }

    /// Errors after which the connection state is unknown.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            WireError::Protocol { .. }
                | WireError::IdMismatch { .. }
                | WireError::Shape { .. }
                | WireError::Closed
                | WireError::Io(_)
                | WireError::Timeout { .. }
        )
    }

    pub fn attempts(&self) -> u32 {
        match self {
            WireError::RetriesExhausted { attempts, .. } => *attempts,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    InitSession,
    PredictNoise,
    PredictNoiseBatch,
    EncodeLatent,
    DecodeLatent,
    Ocr,
    ClipScore,
    Capabilities,
    Shutdown,
}

impl Op {
    pub const ALL: [Op; 9] = [
        Op::InitSession,
        Op::PredictNoise,
        Op::PredictNoiseBatch,
        Op::EncodeLatent,
        Op::DecodeLatent,
        Op::Ocr,
        Op::ClipScore,
        Op::Capabilities,
        Op::Shutdown,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Op::InitSession => "init_session",
            Op::PredictNoise => "predict_noise",
            Op::PredictNoiseBatch => "predict_noise_batch",
            Op::EncodeLatent => "encode_latent",
            Op::DecodeLatent => "decode_latent",
            Op::Ocr => "ocr",
            Op::ClipScore => "clip_score",
            Op::Capabilities => "capabilities",
            Op::Shutdown => "shutdown",
        }
    }

    pub fn parse(s: &str) -> Option<Op> {
        Self::ALL.into_iter().find(|o| o.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub concurrent: bool,
    pub latent_shape: Vec<usize>,
    pub d_t_max: usize,
    pub supports: Vec<String>,
    #[serde(default)]
    pub attention_records: bool,
}

impl Capabilities {
    pub fn supports(&self, op: Op) -> bool {
        self.supports.iter().any(|s| s == op.as_str())
    }
}

/// Server-side prompt state: the resolved constrained token slots and the
/// latent geometry for one prompt and edge pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub prompt: String,
    pub token_indices: BTreeSet<usize>,
    pub d_t: usize,
    pub latent_shape: Vec<usize>,
}

impl Session {
    pub fn validate(&self) -> Result<(), WireError> {
        if let Some(&i) = self.token_indices.iter().find(|&&i| i >= self.d_t) {
            return Err(WireError::Malformed {
                what: "session",
                reason: format!("token index {i} outside 0..{}", self.d_t),
            });
        }
        if self.latent_shape.len() != 3 {
            return Err(WireError::Malformed {
                what: "session",
                reason: format!("latent shape {:?} is not (c, h, w)", self.latent_shape),
            });
        }
        Ok(())
    }

    pub fn latent_shape3(&self) -> [usize; 3] {
        [self.latent_shape[0], self.latent_shape[1], self.latent_shape[2]]
    }
}

/// Directive fields shipped in the header; the mask travels as a `u8`
/// tensor at canvas resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectiveHeader {
    pub token_indices: Vec<usize>,
    pub lambda: f32,
    pub apply_to: Branches,
}
