//! Binary command/telemetry frame shared by the OBDH and every subsystem.
//!
//! Wire layout (all multi-byte fields big-endian):
//!
//! ```text
//! +------+------+--------+-------+-----+-----+-----------+--------+
//! | 0xEB | 0x90 | dev_id | ftype | seq | len | payload   | crc16  |
//! +------+------+--------+-------+-----+-----+-----------+--------+
//!   sync (2)      1        1       1     1     len bytes   2
//! ```
//!
//! The CRC is CRC-16/CCITT-FALSE over `dev_id..payload`. Command codes live
//! in the first payload byte so the codec stays device-agnostic.

mod crc;
mod deframer;

pub use crc::{crc16, Crc16};
pub use deframer::{CrcErrorInfo, Deframer, DeframerPhase, DeframerStats, Event, RejectReason};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Two-byte synchronisation word that starts every frame.
pub const SYNC: [u8; 2] = [0xEB, 0x90];
/// Sync + dev_id + ftype + seq + len.
pub const HEADER_LEN: usize = 6;
/// Trailing CRC.
pub const CRC_LEN: usize = 2;
/// Fixed bytes around the payload.
pub const OVERHEAD: usize = HEADER_LEN + CRC_LEN;
pub const MAX_PAYLOAD: usize = 255;
/// Longest encoded frame (263 bytes).
pub const MAX_FRAME_LEN: usize = OVERHEAD + MAX_PAYLOAD;

/// Device id reserved for the OBDH itself.
pub const OBDH_DEV_ID: u8 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("payload of {0} bytes exceeds the 255-byte limit")]
    PayloadTooLong(usize),
    #[error("unknown frame type byte 0x{0:02x}")]
    UnknownType(u8),
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} bytes follow the frame")]
    TrailingBytes(usize),
    #[error("missing sync word")]
    BadSync,
    #[error("crc mismatch: computed 0x{computed:04x}, received 0x{received:04x}")]
    Crc { computed: u16, received: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum FrameType {
    Cmd = 0x01,
    Tlm = 0x02,
    Ack = 0x03,
    Nak = 0x04,
}

impl FrameType {
    pub const fn as_byte(self) -> u8 {
        self as u8
    }

    pub const fn name(self) -> &'static str {
        match self {
            FrameType::Cmd => "cmd",
            FrameType::Tlm => "tlm",
            FrameType::Ack => "ack",
            FrameType::Nak => "nak",
        }
    }
}

impl TryFrom<u8> for FrameType {
    type Error = FrameError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            0x01 => Ok(FrameType::Cmd),
            0x02 => Ok(FrameType::Tlm),
            0x03 => Ok(FrameType::Ack),
            0x04 => Ok(FrameType::Nak),
            other => Err(FrameError::UnknownType(other)),
        }
    }
}

impl fmt::Display for FrameType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One decoded frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub dev_id: u8,
    pub ftype: FrameType,
    pub seq: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(dev_id: u8, ftype: FrameType, seq: u8, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            dev_id,
            ftype,
            seq,
            payload: payload.into(),
        }
    }

    /// Command frame whose payload is `code ‖ params`.
    pub fn command(dev_id: u8, seq: u8, code: u8, params: &[u8]) -> Self {
        let mut payload = Vec::with_capacity(1 + params.len());
        payload.push(code);
        payload.extend_from_slice(params);
        Self::new(dev_id, FrameType::Cmd, seq, payload)
    }

    /// First payload byte, if any.
    pub fn code(&self) -> Option<u8> {
        self.payload.first().copied()
    }

    pub fn encoded_len(&self) -> usize {
        OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    /// Appends the encoded frame to `out`. Nothing is written on error.
    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), FrameError> {
        let len = self.payload.len();
        if len > MAX_PAYLOAD {
            return Err(FrameError::PayloadTooLong(len));
        }
        let start = out.len();
        out.extend_from_slice(&SYNC);
        out.extend_from_slice(&[self.dev_id, self.ftype.as_byte(), self.seq, len as u8]);
        out.extend_from_slice(&self.payload);
        let crc = crc16(&out[start + SYNC.len()..]);
        out.extend_from_slice(&crc.to_be_bytes());
        Ok(())
    }

    /// Strict decode of exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame, FrameError> {
        if bytes.len() < OVERHEAD {
            return Err(FrameError::Truncated {
                needed: OVERHEAD,
                have: bytes.len(),
            });
        }
        if bytes[..2] != SYNC {
            return Err(FrameError::BadSync);
        }
        let len = bytes[5] as usize;
        let total = OVERHEAD + len;
        if bytes.len() < total {
            return Err(FrameError::Truncated {
                needed: total,
                have: bytes.len(),
            });
        }
        if bytes.len() > total {
            return Err(FrameError::TrailingBytes(bytes.len() - total));
        }
        let computed = crc16(&bytes[2..HEADER_LEN + len]);
        let received = u16::from_be_bytes([bytes[HEADER_LEN + len], bytes[HEADER_LEN + len + 1]]);
        if computed != received {
            return Err(FrameError::Crc { computed, received });
        }
        let ftype = FrameType::try_from(bytes[3])?;
        Ok(Frame {
            dev_id: bytes[2],
            ftype,
            seq: bytes[4],
            payload: bytes[HEADER_LEN..HEADER_LEN + len].to_vec(),
        })
    }
}

/// Encodes `frame`; shorthand for [`Frame::encode`].
pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    frame.encode()
}
