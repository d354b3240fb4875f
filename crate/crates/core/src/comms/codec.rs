//! Frame layout (all header integers big-endian):
//!
//! ```text
//! [payload length: u32][kind: u8][sender id: u32][version: u64][payload]
//! ```

use std::io::{self, Read};

use thiserror::Error;

use crate::types::WorkerId;

pub const HEADER_LEN: usize = 17;
/// Largest payload whose frame length still fits in 32 bits.
pub const MAX_PAYLOAD: usize = u32::MAX as usize - HEADER_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Trajectory = 0,
    Params = 1,
    Control = 2,
    /// Sampled transitions served by a buffer to a learner.
    Batch = 3,
    /// Gradient from a helper learner to its group's lead learner.
    Gradient = 4,
}

impl Kind {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Self::Trajectory,
            1 => Self::Params,
            2 => Self::Control,
            3 => Self::Batch,
            4 => Self::Gradient,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: Kind,
    pub sender_id: WorkerId,
    pub version: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(kind: Kind, sender_id: WorkerId, version: u64, payload: Vec<u8>) -> Self {
        Self {
            kind,
            sender_id,
            version,
            payload,
        }
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("payload of {0} bytes exceeds the frame limit")]
    PayloadTooLarge(usize),
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("frame has {0} trailing bytes")]
    Trailing(usize),
    #[error("unknown envelope kind {0}")]
    UnknownKind(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn check_payload_len(len: usize) -> Result<(), CodecError> {
    if len > MAX_PAYLOAD {
        Err(CodecError::PayloadTooLarge(len))
    } else {
        Ok(())
    }
}

fn header(e: &Envelope) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&(e.payload.len() as u32).to_be_bytes());
    h[4] = e.kind as u8;
    h[5..9].copy_from_slice(&e.sender_id.to_be_bytes());
    h[9..17].copy_from_slice(&e.version.to_be_bytes());
    h
}

pub fn encode(e: &Envelope) -> Result<Vec<u8>, CodecError> {
    check_payload_len(e.payload.len())?;
    let mut out = Vec::with_capacity(e.frame_len());
    out.extend_from_slice(&header(e));
    out.extend_from_slice(&e.payload);
    Ok(out)
}

struct Header {
    len: usize,
    kind: Kind,
    sender_id: WorkerId,
    version: u64,
}

fn parse_header(h: &[u8]) -> Result<Header, CodecError> {
    let len = u32::from_be_bytes(h[0..4].try_into().unwrap()) as usize;
    let kind = Kind::from_tag(h[4]).ok_or(CodecError::UnknownKind(h[4]))?;
    Ok(Header {
        len,
        kind,
        sender_id: u32::from_be_bytes(h[5..9].try_into().unwrap()),
        version: u64::from_be_bytes(h[9..17].try_into().unwrap()),
    })
}

/// Decodes exactly one frame.
pub fn decode(bytes: &[u8]) -> Result<Envelope, CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated {
            needed: HEADER_LEN,
            have: bytes.len(),
        });
    }
    let h = parse_header(&bytes[..HEADER_LEN])?;
    let needed = HEADER_LEN + h.len;
    if bytes.len() < needed {
        return Err(CodecError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(CodecError::Trailing(bytes.len() - needed));
    }
    Ok(Envelope {
        kind: h.kind,
        sender_id: h.sender_id,
        version: h.version,
        payload: bytes[HEADER_LEN..].to_vec(),
    })
}

/// Reads one frame from a stream. `Ok(None)` on a clean end of stream at a
/// frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Envelope>, CodecError> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(CodecError::Truncated {
                    needed: HEADER_LEN,
                    have: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = parse_header(&h)?;
    let mut payload = vec![0u8; h.len];
    r.read_exact(&mut payload)?;
    Ok(Some(Envelope {
        kind: h.kind,
        sender_id: h.sender_id,
        version: h.version,
        payload,
    }))
}
