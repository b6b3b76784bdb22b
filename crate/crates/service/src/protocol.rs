//! Wire format.
//!
//! Every frame is `"BSN1" | msg_type u8 | payload_len u32 BE | payload`.
//! All multi-byte integers on the wire are big-endian, including pixels.
//! (RAW16 files on disk are little-endian; see `bsonet_core::image`.)
//!
//! Payloads:
//!
//! | type | layout |
//! |------|--------|
//! | 1 request  | `request_id u64, width u32, height u32, bit_depth u8, 0u8 x3, pixels u16 x w*h` |
//! | 2 response | `request_id u64, status u8, 0u8 x3, inference_micros u64, width u32, height u32, bit_depth u8, 0u8 x3, pixels` |
//! | 3 error    | `request_id u64, status u8, 0u8 x3, message (UTF-8, rest of payload)` |
//! | 4 ping, 5 pong | empty |

use std::fmt;
use std::io::{Read, Write};

pub const MAGIC: [u8; 4] = *b"BSN1";
pub const HEADER_LEN: usize = 9;
pub const BIT_DEPTH: u8 = 16;

const REQUEST_FIXED: usize = 20;
const RESPONSE_FIXED: usize = 32;
const ERROR_FIXED: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    OptimizeRequest = 1,
    OptimizeResponse = 2,
    Error = 3,
    Ping = 4,
    Pong = 5,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::OptimizeRequest,
            2 => Self::OptimizeResponse,
            3 => Self::Error,
            4 => Self::Ping,
            5 => Self::Pong,
            _ => return None,
        })
    }
}

/// Status codes carried by responses and error frames.
pub mod status {
    pub const OK: u8 = 0;
    pub const MALFORMED_FRAME: u8 = 1;
    pub const UNSUPPORTED_BIT_DEPTH: u8 = 2;
    pub const INFERENCE_FAILED: u8 = 3;
    pub const STORAGE_FAILED: u8 = 4;
    pub const UNEXPECTED_MESSAGE: u8 = 5;
    pub const PAYLOAD_TOO_LARGE: u8 = 6;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptimizeRequest {
    pub request_id: u64,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptimizeResponse {
    pub request_id: u64,
    pub status: u8,
    pub inference_micros: u64,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorReply {
    pub request_id: u64,
    pub status: u8,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Request(OptimizeRequest),
    Response(OptimizeResponse),
    Error(ErrorReply),
    Ping,
    Pong,
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Request(_) => MsgType::OptimizeRequest,
            Message::Response(_) => MsgType::OptimizeResponse,
            Message::Error(_) => MsgType::Error,
            Message::Ping => MsgType::Ping,
            Message::Pong => MsgType::Pong,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolErrorKind {
    BadMagic,
    UnknownType(u8),
    /// Frame ends before `expected` bytes.
    Truncated { expected: usize, actual: usize },
    /// Bytes beyond the declared payload.
    TrailingBytes { expected: usize, actual: usize },
    UnsupportedBitDepth(u8),
    NonZeroReserved,
    /// Declared dimensions disagree with the pixel data.
    PixelCount { width: u32, height: u32, payload: usize },
    InvalidUtf8,
    PayloadTooLarge { declared: u32, limit: u32 },
}

/// A malformed frame, located by the byte offset (from the frame start)
/// where decoding gave up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolError {
    pub offset: usize,
    pub kind: ProtocolErrorKind,
}

impl ProtocolError {
    fn at(offset: usize, kind: ProtocolErrorKind) -> Self {
        Self { offset, kind }
    }

    /// Status code an error reply should carry for this failure.
    pub fn status(&self) -> u8 {
        match self.kind {
            ProtocolErrorKind::UnsupportedBitDepth(_) => status::UNSUPPORTED_BIT_DEPTH,
            ProtocolErrorKind::PayloadTooLarge { .. } => status::PAYLOAD_TOO_LARGE,
            _ => status::MALFORMED_FRAME,
        }
    }
}

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed frame at byte {}: ", self.offset)?;
        match &self.kind {
            ProtocolErrorKind::BadMagic => write!(f, "bad magic"),
            ProtocolErrorKind::UnknownType(t) => write!(f, "unknown message type {t}"),
            ProtocolErrorKind::Truncated { expected, actual } => {
                write!(f, "truncated, expected {expected} bytes, got {actual}")
            }
            ProtocolErrorKind::TrailingBytes { expected, actual } => {
                write!(f, "expected {expected} bytes, got {actual}")
            }
            ProtocolErrorKind::UnsupportedBitDepth(d) => write!(f, "unsupported bit depth {d}"),
            ProtocolErrorKind::NonZeroReserved => write!(f, "reserved bytes must be zero"),
            ProtocolErrorKind::PixelCount { width, height, payload } => write!(
                f,
                "{width}x{height} image does not match {payload} pixel bytes"
            ),
            ProtocolErrorKind::InvalidUtf8 => write!(f, "error message is not UTF-8"),
            ProtocolErrorKind::PayloadTooLarge { declared, limit } => {
                write!(f, "payload of {declared} bytes exceeds limit {limit}")
            }
        }
    }
}

impl std::error::Error for ProtocolError {}

fn put_pixels(out: &mut Vec<u8>, pixels: &[u16]) {
    out.reserve(pixels.len() * 2);
    for p in pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
}

/// Serializes only the payload of `msg`.
pub fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Request(r) => {
            out.reserve(REQUEST_FIXED + 2 * r.pixels.len());
            out.extend_from_slice(&r.request_id.to_be_bytes());
            out.extend_from_slice(&r.width.to_be_bytes());
            out.extend_from_slice(&r.height.to_be_bytes());
            out.extend_from_slice(&[BIT_DEPTH, 0, 0, 0]);
            put_pixels(&mut out, &r.pixels);
        }
        Message::Response(r) => {
            out.reserve(RESPONSE_FIXED + 2 * r.pixels.len());
            out.extend_from_slice(&r.request_id.to_be_bytes());
            out.extend_from_slice(&[r.status, 0, 0, 0]);
            out.extend_from_slice(&r.inference_micros.to_be_bytes());
            out.extend_from_slice(&r.width.to_be_bytes());
            out.extend_from_slice(&r.height.to_be_bytes());
            out.extend_from_slice(&[BIT_DEPTH, 0, 0, 0]);
            put_pixels(&mut out, &r.pixels);
        }
        Message::Error(e) => {
            out.reserve(ERROR_FIXED + e.message.len());
            out.extend_from_slice(&e.request_id.to_be_bytes());
            out.extend_from_slice(&[e.status, 0, 0, 0]);
            out.extend_from_slice(e.message.as_bytes());
        }
        Message::Ping | Message::Pong => {}
    }
    out
}

/// Serializes a complete frame.
///
/// # Panics
/// If the payload exceeds `u32::MAX` bytes.
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    let len = u32::try_from(payload.len()).expect("payload exceeds u32 length field");
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(msg.msg_type() as u8);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parses the 9-byte header into the message type and payload length.
pub fn decode_header(header: &[u8]) -> Result<(MsgType, u32), ProtocolError> {
    if header.len() < HEADER_LEN {
        let ok = header.iter().zip(MAGIC.iter()).position(|(a, b)| a != b);
        if let Some(i) = ok {
            return Err(ProtocolError::at(i, ProtocolErrorKind::BadMagic));
        }
        return Err(ProtocolError::at(
            header.len(),
            ProtocolErrorKind::Truncated { expected: HEADER_LEN, actual: header.len() },
        ));
    }
    if let Some(i) = header[..4].iter().zip(MAGIC.iter()).position(|(a, b)| a != b) {
        return Err(ProtocolError::at(i, ProtocolErrorKind::BadMagic));
    }
    let t = MsgType::from_u8(header[4])
        .ok_or(ProtocolError::at(4, ProtocolErrorKind::UnknownType(header[4])))?;
    let len = u32::from_be_bytes(header[5..9].try_into().unwrap());
    Ok((t, len))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Offset of `bytes[0]` within the frame, for error reporting.
    base: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.bytes.len() - self.pos < n {
            return Err(ProtocolError::at(
                self.base + self.bytes.len(),
                ProtocolErrorKind::Truncated {
                    expected: self.base + self.pos + n,
                    actual: self.base + self.bytes.len(),
                },
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn reserved(&mut self) -> Result<(), ProtocolError> {
        let at = self.offset();
        if self.take(3)?.iter().any(|&b| b != 0) {
            return Err(ProtocolError::at(at, ProtocolErrorKind::NonZeroReserved));
        }
        Ok(())
    }

    fn bit_depth(&mut self) -> Result<(), ProtocolError> {
        let at = self.offset();
        match self.u8()? {
            BIT_DEPTH => self.reserved(),
            d => Err(ProtocolError::at(at, ProtocolErrorKind::UnsupportedBitDepth(d))),
        }
    }

    fn pixels(&mut self, width: u32, height: u32) -> Result<Vec<u16>, ProtocolError> {
        let rest = &self.bytes[self.pos..];
        let count = (width as u64) * (height as u64);
        if rest.len() as u64 != 2 * count {
            return Err(ProtocolError::at(
                self.offset(),
                ProtocolErrorKind::PixelCount { width, height, payload: rest.len() },
            ));
        }
        self.pos = self.bytes.len();
        Ok(rest
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect())
    }
}

/// Parses a payload of the given type. Offsets in errors are relative to
/// the frame start.
pub fn decode_payload(t: MsgType, payload: &[u8]) -> Result<Message, ProtocolError> {
    let mut c = Cursor { bytes: payload, pos: 0, base: HEADER_LEN };
    let msg = match t {
        MsgType::OptimizeRequest => {
            let request_id = c.u64()?;
            let width = c.u32()?;
            let height = c.u32()?;
            c.bit_depth()?;
            let pixels = c.pixels(width, height)?;
            Message::Request(OptimizeRequest { request_id, width, height, pixels })
        }
        MsgType::OptimizeResponse => {
            let request_id = c.u64()?;
            let status = c.u8()?;
            c.reserved()?;
            let inference_micros = c.u64()?;
            let width = c.u32()?;
            let height = c.u32()?;
            c.bit_depth()?;
            let pixels = c.pixels(width, height)?;
            Message::Response(OptimizeResponse {
                request_id,
                status,
                inference_micros,
                width,
                height,
                pixels,
            })
        }
        MsgType::Error => {
            let request_id = c.u64()?;
            let status = c.u8()?;
            c.reserved()?;
            let at = c.offset();
            let message = String::from_utf8(payload[c.pos..].to_vec())
                .map_err(|_| ProtocolError::at(at, ProtocolErrorKind::InvalidUtf8))?;
            Message::Error(ErrorReply { request_id, status, message })
        }
        MsgType::Ping | MsgType::Pong => {
            if !payload.is_empty() {
                return Err(ProtocolError::at(
                    HEADER_LEN,
                    ProtocolErrorKind::TrailingBytes {
                        expected: HEADER_LEN,
                        actual: HEADER_LEN + payload.len(),
                    },
                ));
            }
            if t == MsgType::Ping {
                Message::Ping
            } else {
                Message::Pong
            }
        }
    };
    Ok(msg)
}

/// Parses exactly one complete frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let (t, len) = decode_header(bytes)?;
    let expected = HEADER_LEN + len as usize;
    if bytes.len() < expected {
        return Err(ProtocolError::at(
            bytes.len(),
            ProtocolErrorKind::Truncated { expected, actual: bytes.len() },
        ));
    }
    if bytes.len() > expected {
        return Err(ProtocolError::at(
            expected,
            ProtocolErrorKind::TrailingBytes { expected, actual: bytes.len() },
        ));
    }
    decode_payload(t, &bytes[HEADER_LEN..])
}

/// Failure while reading a frame from a stream.
#[derive(Debug)]
pub enum ReadError {
    Io(std::io::Error),
    /// The header itself is unusable; the stream cannot be resynchronized.
    Header(ProtocolError),
    /// The frame was consumed whole but its payload is invalid; the stream
    /// is still aligned on the next frame.
    Payload(ProtocolError),
}

/// Reads one frame. Payloads larger than `max_payload` are refused before
/// any payload byte is read.
pub fn read_message(r: &mut impl Read, max_payload: u32) -> Result<Message, ReadError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).map_err(ReadError::Io)?;
    let (t, len) = match decode_header(&header) {
        Ok(h) => h,
        Err(e) => {
            let len = u32::from_be_bytes(header[5..9].try_into().unwrap());
            if matches!(e.kind, ProtocolErrorKind::UnknownType(_)) && len <= max_payload {
                // The length is still trustworthy: skip the payload, stay aligned.
                std::io::copy(&mut r.by_ref().take(len as u64), &mut std::io::sink())
                    .map_err(ReadError::Io)?;
                return Err(ReadError::Payload(e));
            }
            return Err(ReadError::Header(e));
        }
    };
    if len > max_payload {
        return Err(ReadError::Header(ProtocolError::at(
            5,
            ProtocolErrorKind::PayloadTooLarge { declared: len, limit: max_payload },
        )));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(ReadError::Io)?;
    decode_payload(t, &payload).map_err(ReadError::Payload)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> std::io::Result<()> {
    w.write_all(&encode_frame(msg))?;
    w.flush()
}
