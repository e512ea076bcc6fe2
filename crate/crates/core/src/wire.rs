//! Binary wire format for agent messages: length-prefixed records of a
//! sender id, a message kind and an `f64` payload, all little-endian.
//!
//! Layout: `len: u32` (byte length of the body) followed by the body
//! `sender: u32, kind: u8, payload: [f64]`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("buffer too short: need {need} bytes, have {have}")]
    UnexpectedEof { need: usize, have: usize },
    #[error("body length {0} is not 5 + a multiple of 8")]
    BadLength(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub sender: u32,
    pub kind: u8,
    pub payload: Vec<f64>,
}

impl Record {
    pub fn encode(&self) -> Vec<u8> {
        let body_len = 4 + 1 + 8 * self.payload.len();
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.push(self.kind);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decode one record from the front of `buf`; returns it with the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Record, usize), WireError> {
        if buf.len() < 4 {
            return Err(WireError::UnexpectedEof { need: 4, have: buf.len() });
        }
        let body_len = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        if buf.len() < 4 + body_len {
            return Err(WireError::UnexpectedEof { need: 4 + body_len, have: buf.len() });
        }
        if body_len < 5 || (body_len - 5) % 8 != 0 {
            return Err(WireError::BadLength(body_len));
        }
        let body = &buf[4..4 + body_len];
        let sender = u32::from_le_bytes(body[0..4].try_into().unwrap());
        let kind = body[4];
        let payload = body[5..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Record { sender, kind, payload }, 4 + body_len))
    }
}
