//! Frame layout and the incremental, resynchronizing decoder.
//!
//! ```plain
//! FF FF FD 00 | id | len_lo len_hi | instr | params ... | crc_lo crc_hi
//! ```
//!
//! `len = 1 + params.len() + 2`. The CRC covers every byte from the first
//! header byte through the last parameter byte. Header sequences inside the
//! parameters are *not* byte-stuffed: once a header has been matched and the
//! frame's CRC validates, any header-looking bytes in the parameters are
//! content.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::crc::crc16;

pub const HEADER: [u8; 4] = [0xFF, 0xFF, 0xFD, 0x00];
pub const MAX_PARAMS: usize = 1024;
pub const BROADCAST_ID: u8 = 0xFE;
pub const MAX_DEVICE_ID: u8 = 252;

/// Bytes before the parameters: header, id, length, instruction.
const PREFIX_LEN: usize = 8;
/// Framing overhead: prefix + CRC.
pub const OVERHEAD: usize = PREFIX_LEN + 2;
const MIN_LENGTH_FIELD: usize = 3;
const MAX_LENGTH_FIELD: usize = MAX_PARAMS + 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instruction {
    Ping,
    Read,
    Write,
    SyncRead,
    SyncWrite,
    Status,
}

impl Instruction {
    pub fn code(self) -> u8 {
        match self {
            Instruction::Ping => 0x01,
            Instruction::Read => 0x02,
            Instruction::Write => 0x03,
            Instruction::SyncRead => 0x82,
            Instruction::SyncWrite => 0x83,
            Instruction::Status => 0x55,
        }
    }

    pub fn from_code(code: u8) -> Option<Instruction> {
        Some(match code {
            0x01 => Instruction::Ping,
            0x02 => Instruction::Read,
            0x03 => Instruction::Write,
            0x82 => Instruction::SyncRead,
            0x83 => Instruction::SyncWrite,
            0x55 => Instruction::Status,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub id: u8,
    pub instruction: Instruction,
    pub params: Vec<u8>,
    /// Populated by [`decode`]; ignored by [`encode`].
    #[serde(default)]
    pub crc: u16,
}

impl Frame {
    pub fn new(id: u8, instruction: Instruction, params: Vec<u8>) -> Frame {
        Frame { id, instruction, params, crc: 0 }
    }

    pub fn ping(id: u8) -> Frame {
        Frame::new(id, Instruction::Ping, Vec::new())
    }

    pub fn read(id: u8, addr: u16, len: u16) -> Frame {
        let mut p = Vec::with_capacity(4);
        p.extend_from_slice(&addr.to_le_bytes());
        p.extend_from_slice(&len.to_le_bytes());
        Frame::new(id, Instruction::Read, p)
    }

    pub fn write(id: u8, addr: u16, data: &[u8]) -> Frame {
        let mut p = Vec::with_capacity(2 + data.len());
        p.extend_from_slice(&addr.to_le_bytes());
        p.extend_from_slice(data);
        Frame::new(id, Instruction::Write, p)
    }

    pub fn sync_read(addr: u16, len: u16, ids: &[u8]) -> Frame {
        let mut p = Vec::with_capacity(4 + ids.len());
        p.extend_from_slice(&addr.to_le_bytes());
        p.extend_from_slice(&len.to_le_bytes());
        p.extend_from_slice(ids);
        Frame::new(BROADCAST_ID, Instruction::SyncRead, p)
    }

    /// `entries` are `(id, data)` pairs; every `data` must be `len` bytes.
    pub fn sync_write(addr: u16, len: u16, entries: &[(u8, &[u8])]) -> Frame {
        let mut p = Vec::with_capacity(4 + entries.len() * (1 + usize::from(len)));
        p.extend_from_slice(&addr.to_le_bytes());
        p.extend_from_slice(&len.to_le_bytes());
        for (id, data) in entries {
            p.push(*id);
            p.extend_from_slice(data);
        }
        Frame::new(BROADCAST_ID, Instruction::SyncWrite, p)
    }

    /// STATUS frame: first parameter byte is the device error field.
    pub fn status(id: u8, error: u8, data: &[u8]) -> Frame {
        let mut p = Vec::with_capacity(1 + data.len());
        p.push(error);
        p.extend_from_slice(data);
        Frame::new(id, Instruction::Status, p)
    }

    /// Error byte of a STATUS frame.
    pub fn status_error(&self) -> Option<u8> {
        (self.instruction == Instruction::Status).then(|| self.params.first().copied()).flatten()
    }

    /// Data bytes of a STATUS frame (after the error byte).
    pub fn status_data(&self) -> &[u8] {
        match self.instruction {
            Instruction::Status if !self.params.is_empty() => &self.params[1..],
            _ => &[],
        }
    }

    pub fn encoded_len(&self) -> usize {
        OVERHEAD + self.params.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("params too long: {0} bytes (max {MAX_PARAMS})")]
    ParamsTooLong(usize),
    #[error("invalid device id {0:#04x}")]
    InvalidId(u8),
}

pub fn valid_id(id: u8) -> bool {
    id <= MAX_DEVICE_ID || id == BROADCAST_ID
}

/// Serializes a frame; the CRC is always recomputed from content.
pub fn encode(frame: &Frame) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    encode_into(frame, &mut out)?;
    Ok(out)
}

pub fn encode_into(frame: &Frame, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    if frame.params.len() > MAX_PARAMS {
        return Err(EncodeError::ParamsTooLong(frame.params.len()));
    }
    if !valid_id(frame.id) {
        return Err(EncodeError::InvalidId(frame.id));
    }
    let start = out.len();
    let len = (frame.params.len() + 3) as u16;
    out.extend_from_slice(&HEADER);
    out.push(frame.id);
    out.extend_from_slice(&len.to_le_bytes());
    out.push(frame.instruction.code());
    out.extend_from_slice(&frame.params);
    let crc = crc16(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(())
}

/// Non-fatal problems found while decoding; offsets are relative to the
/// start of the input slice handed to the decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeError {
    #[error("resync: skipped {skipped} byte(s) at offset {offset}")]
    Resync { offset: usize, skipped: usize },
    #[error("crc mismatch at offset {offset}: expected {expected:#06x}, got {actual:#06x}")]
    CrcMismatch { offset: usize, expected: u16, actual: u16 },
    #[error("bad length field {length} at offset {offset}")]
    BadLength { offset: usize, length: usize },
    #[error("unknown instruction {code:#04x} at offset {offset}")]
    UnknownInstruction { offset: usize, code: u8 },
    #[error("invalid id {id:#04x} at offset {offset}")]
    InvalidId { offset: usize, id: u8 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub frames: Vec<Frame>,
    pub diagnostics: Vec<DecodeError>,
    /// Bytes fully accounted for (frames, rejected frames and skipped garbage).
    pub consumed: usize,
    /// Trailing bytes that may still begin a frame.
    pub residue: usize,
}

fn header_at(buf: &[u8], i: usize) -> bool {
    buf.len() >= i + HEADER.len() && buf[i..i + HEADER.len()] == HEADER
}

/// True if `tail` could be the beginning of a header.
fn header_prefix(tail: &[u8]) -> bool {
    tail.len() < HEADER.len() && HEADER.starts_with(tail)
}

/// One-shot decode of a byte slice.
pub fn decode(stream: &[u8]) -> Decoded {
    let mut out = Decoded::default();
    let mut pos = 0;
    let mut garbage_start: Option<usize> = None;

    let flush_garbage = |out: &mut Decoded, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            out.diagnostics.push(DecodeError::Resync { offset: s, skipped: end - s });
        }
    };

    while pos < stream.len() {
        if !header_at(stream, pos) {
            if header_prefix(&stream[pos..]) {
                break;
            }
            garbage_start.get_or_insert(pos);
            pos += 1;
            continue;
        }
        flush_garbage(&mut out, &mut garbage_start, pos);

        if stream.len() < pos + PREFIX_LEN {
            break;
        }
        let id = stream[pos + 4];
        let length = usize::from(u16::from_le_bytes([stream[pos + 5], stream[pos + 6]]));
        if !(MIN_LENGTH_FIELD..=MAX_LENGTH_FIELD).contains(&length) {
            out.diagnostics.push(DecodeError::BadLength { offset: pos, length });
            // Skip the header so scanning can find the next one.
            pos += HEADER.len();
            continue;
        }
        let total = 7 + length;
        if stream.len() < pos + total {
            break;
        }
        let body_end = pos + total - 2;
        let expected = crc16(&stream[pos..body_end]);
        let actual = u16::from_le_bytes([stream[body_end], stream[body_end + 1]]);
        let offset = pos;
        pos += total;
        if expected != actual {
            out.diagnostics.push(DecodeError::CrcMismatch { offset, expected, actual });
            continue;
        }
        let code = stream[offset + 7];
        let Some(instruction) = Instruction::from_code(code) else {
            out.diagnostics.push(DecodeError::UnknownInstruction { offset, code });
            continue;
        };
        if !valid_id(id) {
            out.diagnostics.push(DecodeError::InvalidId { offset, id });
            continue;
        }
        out.frames.push(Frame { id, instruction, params: stream[offset + PREFIX_LEN..body_end].to_vec(), crc: actual });
    }
    flush_garbage(&mut out, &mut garbage_start, pos);
    out.consumed = pos;
    out.residue = stream.len() - pos;
    out
}

/// Incremental decoder: feed chunks as they arrive, residue is carried over.
#[derive(Debug, Default)]
pub struct Decoder {
    buf: Vec<u8>,
    /// Absolute stream offset of `buf[0]`.
    base: usize,
}

impl Decoder {
    pub fn new() -> Decoder {
        Decoder::default()
    }

    /// Decodes everything complete so far. Diagnostic offsets are absolute
    /// positions in the overall stream.
    pub fn feed(&mut self, chunk: &[u8]) -> (Vec<Frame>, Vec<DecodeError>) {
        self.buf.extend_from_slice(chunk);
        let mut d = decode(&self.buf);
        for diag in &mut d.diagnostics {
            shift_offset(diag, self.base);
        }
        self.buf.drain(..d.consumed);
        self.base += d.consumed;
        (d.frames, d.diagnostics)
    }

    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

fn shift_offset(diag: &mut DecodeError, base: usize) {
    match diag {
        DecodeError::Resync { offset, .. }
        | DecodeError::CrcMismatch { offset, .. }
        | DecodeError::BadLength { offset, .. }
        | DecodeError::UnknownInstruction { offset, .. }
        | DecodeError::InvalidId { offset, .. } => *offset += base,
    }
}
