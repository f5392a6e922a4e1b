//! Data exchanged between the engine and an executor, the framed wire
//! encoding of that data, and the two FNV-1a hashes.
//!
//! Frame layout: one kind byte (`0x01` config, `0x02` result), a 4-byte
//! big-endian payload length, then the payload. Inside the payload every
//! integer is little-endian and fixed width; floats travel as their IEEE-754
//! bit patterns.

use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of call-stack frames folded into a context hash.
pub const DEFAULT_CONTEXT_DEPTH: usize = 32;

const FNV32_OFFSET: u32 = 2_166_136_261;
const FNV32_PRIME: u32 = 16_777_619;
const FNV64_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV64_PRIME: u64 = 0x0000_0100_0000_01b3;

pub const KIND_CONFIG: u8 = 0x01;
pub const KIND_RESULT: u8 = 0x02;

/// Type assigned to a range of input bytes by the read that consumed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TypeTag {
    Boolean,
    Uint8,
    Uint16,
    Uint32,
    Uint64,
    Sint8,
    Sint16,
    Sint32,
    Sint64,
    Float32,
    Float64,
    Untyped8,
    Untyped16,
    Untyped32,
    Untyped64,
}

impl TypeTag {
    pub const ALL: [TypeTag; 15] = [
        TypeTag::Boolean,
        TypeTag::Uint8,
        TypeTag::Uint16,
        TypeTag::Uint32,
        TypeTag::Uint64,
        TypeTag::Sint8,
        TypeTag::Sint16,
        TypeTag::Sint32,
        TypeTag::Sint64,
        TypeTag::Float32,
        TypeTag::Float64,
        TypeTag::Untyped8,
        TypeTag::Untyped16,
        TypeTag::Untyped32,
        TypeTag::Untyped64,
    ];

    pub fn byte_width(self) -> usize {
        use TypeTag::*;
        match self {
            Boolean | Uint8 | Sint8 | Untyped8 => 1,
            Uint16 | Sint16 | Untyped16 => 2,
            Uint32 | Sint32 | Float32 | Untyped32 => 4,
            Uint64 | Sint64 | Float64 | Untyped64 => 8,
        }
    }

    pub fn bit_width(self) -> u32 {
        8 * self.byte_width() as u32
    }

    pub fn is_untyped(self) -> bool {
        matches!(
            self,
            TypeTag::Untyped8 | TypeTag::Untyped16 | TypeTag::Untyped32 | TypeTag::Untyped64
        )
    }

    pub fn is_float(self) -> bool {
        matches!(self, TypeTag::Float32 | TypeTag::Float64)
    }

    pub fn is_signed(self) -> bool {
        matches!(
            self,
            TypeTag::Sint8 | TypeTag::Sint16 | TypeTag::Sint32 | TypeTag::Sint64
        )
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|t| *t == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        use TypeTag::*;
        match self {
            Boolean => "BOOLEAN",
            Uint8 => "UINT8",
            Uint16 => "UINT16",
            Uint32 => "UINT32",
            Uint64 => "UINT64",
            Sint8 => "SINT8",
            Sint16 => "SINT16",
            Sint32 => "SINT32",
            Sint64 => "SINT64",
            Float32 => "FLOAT32",
            Float64 => "FLOAT64",
            Untyped8 => "UNTYPED8",
            Untyped16 => "UNTYPED16",
            Untyped32 => "UNTYPED32",
            Untyped64 => "UNTYPED64",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.name() == name)
    }

    /// Renders the little-endian value stored in `bytes` (exactly
    /// `byte_width` of them) as text.
    pub fn format_value(self, bytes: &[u8]) -> String {
        let mut buf = [0u8; 8];
        buf[..bytes.len()].copy_from_slice(bytes);
        let raw = u64::from_le_bytes(buf);
        use TypeTag::*;
        match self {
            Boolean => u8::from(raw != 0).to_string(),
            Uint8 | Uint16 | Uint32 | Uint64 => raw.to_string(),
            Sint8 => (raw as u8 as i8).to_string(),
            Sint16 => (raw as u16 as i16).to_string(),
            Sint32 => (raw as u32 as i32).to_string(),
            Sint64 => (raw as i64).to_string(),
            Float32 => format!("{:?}", f32::from_bits(raw as u32)),
            Float64 => format!("{:?}", f64::from_bits(raw)),
            Untyped8 | Untyped16 | Untyped32 | Untyped64 => {
                format!("0x{:0width$x}", raw, width = 2 * bytes.len())
            }
        }
    }
}

impl fmt::Display for TypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    Normal,
    Crash,
    Timeout,
    BoundaryConditionViolation,
}

impl Termination {
    pub const ALL: [Termination; 4] = [
        Termination::Normal,
        Termination::Crash,
        Termination::Timeout,
        Termination::BoundaryConditionViolation,
    ];

    pub fn code(self) -> u8 {
        match self {
            Termination::Normal => 0,
            Termination::Crash => 1,
            Termination::Timeout => 2,
            Termination::BoundaryConditionViolation => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Termination::Normal => "NORMAL",
            Termination::Crash => "CRASH",
            Termination::Timeout => "TIMEOUT",
            Termination::BoundaryConditionViolation => "BOUNDARY_CONDITION_VIOLATION",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Static Boolean-instruction id paired with the calling-context hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExecutionId {
    pub uid: u32,
    pub ctx: u32,
}

impl ExecutionId {
    pub fn new(uid: u32, ctx: u32) -> Self {
        ExecutionId { uid, ctx }
    }
}

impl fmt::Display for ExecutionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{:08x}", self.uid, self.ctx)
    }
}

/// One evaluation of a Boolean instruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub id: ExecutionId,
    pub direction: bool,
    /// Branching-function value. Never NaN once stored.
    pub value: f64,
    pub xor: bool,
    /// Input bytes consumed before this record was emitted.
    pub nbytes: u32,
}

impl ConditionRecord {
    pub fn new(id: ExecutionId, direction: bool, value: f64, xor: bool, nbytes: u32) -> Self {
        ConditionRecord {
            id,
            direction,
            value: canonical_value(value),
            xor,
            nbytes,
        }
    }
}

/// NaN branching values are stored as +infinity.
pub fn canonical_value(value: f64) -> f64 {
    if value.is_nan() {
        f64::INFINITY
    } else {
        value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FillByte(u8);

impl FillByte {
    pub const ZERO: FillByte = FillByte(0);
    pub const ALTERNATING: FillByte = FillByte(85);

    pub fn new(value: u8) -> Option<Self> {
        match value {
            0 | 85 => Some(FillByte(value)),
            _ => None,
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl Default for FillByte {
    fn default() -> Self {
        FillByte::ZERO
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionConfig {
    pub max_trace_length: u32,
    pub max_stack_size: u32,
    pub max_input_bytes: u32,
    pub fill_byte: FillByte,
    pub input: Vec<u8>,
}

impl ExecutionConfig {
    pub fn with_input(&self, input: Vec<u8>) -> Self {
        ExecutionConfig {
            input,
            ..self.clone()
        }
    }
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        ExecutionConfig {
            max_trace_length: 10_000,
            max_stack_size: 256,
            max_input_bytes: 4096,
            fill_byte: FillByte::ZERO,
            input: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub termination: Termination,
    pub bytes_read: Vec<u8>,
    pub type_tags: Vec<TypeTag>,
    pub trace: Vec<ConditionRecord>,
}

impl ExecutionResult {
    /// Checks the structural invariants every executor must uphold.
    pub fn is_well_formed(&self, config: &ExecutionConfig) -> bool {
        let widths: usize = self.type_tags.iter().map(|t| t.byte_width()).sum();
        let monotone = self.trace.windows(2).all(|w| w[0].nbytes <= w[1].nbytes);
        widths == self.bytes_read.len()
            && self.trace.len() <= config.max_trace_length as usize
            && monotone
            && self.trace.iter().all(|r| !r.value.is_nan())
    }
}

/// One FNV-1a round over the little-endian bytes of `word`.
pub fn fnv32_step(mut hash: u32, word: u32) -> u32 {
    for b in word.to_le_bytes() {
        hash ^= u32::from(b);
        hash = hash.wrapping_mul(FNV32_PRIME);
    }
    hash
}

/// Hash of the oldest `min(depth_limit, len)` frames of a call stack.
pub fn context_hash(frames: &[u32], depth_limit: usize) -> u32 {
    frames
        .iter()
        .take(depth_limit)
        .fold(FNV32_OFFSET, |h, &uid| fnv32_step(h, uid))
}

pub fn context_hash_empty() -> u32 {
    FNV32_OFFSET
}

pub fn input_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV64_OFFSET, |mut h, &b| {
        h ^= u64::from(b);
        h.wrapping_mul(FNV64_PRIME)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Config(ExecutionConfig),
    Result(ExecutionResult),
}

impl From<ExecutionConfig> for Message {
    fn from(c: ExecutionConfig) -> Self {
        Message::Config(c)
    }
}

impl From<ExecutionResult> for Message {
    fn from(r: ExecutionResult) -> Self {
        Message::Result(r)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated frame: needed {needed} bytes, had {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown frame kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("invalid payload: {0}")]
    Invalid(String),
    #[error("payload of {0} bytes exceeds the accepted limit")]
    TooLarge(usize),
}

pub fn wire_encode(message: &Message) -> Vec<u8> {
    let (kind, payload) = match message {
        Message::Config(c) => (KIND_CONFIG, encode_config(c)),
        Message::Result(r) => (KIND_RESULT, encode_result(r)),
    };
    let mut out = Vec::with_capacity(5 + payload.len());
    out.push(kind);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decodes exactly one complete frame; trailing bytes are rejected.
pub fn wire_decode(bytes: &[u8]) -> Result<Message, WireError> {
    if bytes.len() < 5 {
        return Err(WireError::Truncated {
            needed: 5,
            available: bytes.len(),
        });
    }
    let kind = bytes[0];
    if kind != KIND_CONFIG && kind != KIND_RESULT {
        return Err(WireError::UnknownKind(kind));
    }
    let len = u32::from_be_bytes(bytes[1..5].try_into().unwrap()) as usize;
    let body = &bytes[5..];
    if body.len() < len {
        return Err(WireError::Truncated {
            needed: 5 + len,
            available: bytes.len(),
        });
    }
    if body.len() > len {
        return Err(WireError::Invalid(format!(
            "{} trailing bytes after frame",
            body.len() - len
        )));
    }
    decode_payload(kind, body)
}

#[derive(Debug, Error)]
pub enum FrameIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

pub fn write_frame<W: Write>(writer: &mut W, message: &Message) -> io::Result<()> {
    writer.write_all(&wire_encode(message))?;
    writer.flush()
}

/// Reads one frame from a stream, refusing payloads above `max_payload`.
pub fn read_frame<R: Read>(reader: &mut R, max_payload: usize) -> Result<Message, FrameIoError> {
    let mut header = [0u8; 5];
    reader.read_exact(&mut header)?;
    let kind = header[0];
    if kind != KIND_CONFIG && kind != KIND_RESULT {
        return Err(WireError::UnknownKind(kind).into());
    }
    let len = u32::from_be_bytes(header[1..5].try_into().unwrap()) as usize;
    if len > max_payload {
        return Err(WireError::TooLarge(len).into());
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    Ok(decode_payload(kind, &body)?)
}

fn encode_config(c: &ExecutionConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + c.input.len());
    out.extend_from_slice(&c.max_trace_length.to_le_bytes());
    out.extend_from_slice(&c.max_stack_size.to_le_bytes());
    out.extend_from_slice(&c.max_input_bytes.to_le_bytes());
    out.push(c.fill_byte.get());
    out.extend_from_slice(&(c.input.len() as u32).to_le_bytes());
    out.extend_from_slice(&c.input);
    out
}

const RECORD_SIZE: usize = 4 + 4 + 1 + 8 + 1 + 4;

fn encode_result(r: &ExecutionResult) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        13 + r.bytes_read.len() + r.type_tags.len() + RECORD_SIZE * r.trace.len(),
    );
    out.push(r.termination.code());
    out.extend_from_slice(&(r.bytes_read.len() as u32).to_le_bytes());
    out.extend_from_slice(&r.bytes_read);
    out.extend_from_slice(&(r.type_tags.len() as u32).to_le_bytes());
    out.extend(r.type_tags.iter().map(|t| t.code()));
    out.extend_from_slice(&(r.trace.len() as u32).to_le_bytes());
    for rec in &r.trace {
        out.extend_from_slice(&rec.id.uid.to_le_bytes());
        out.extend_from_slice(&rec.id.ctx.to_le_bytes());
        out.push(u8::from(rec.direction));
        out.extend_from_slice(&rec.value.to_bits().to_le_bytes());
        out.push(u8::from(rec.xor));
        out.extend_from_slice(&rec.nbytes.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(
            WireError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.buf.len(),
            },
        )?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(WireError::Invalid(format!("bad boolean byte {b}"))),
        }
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::Invalid(format!(
                "{} unread payload bytes",
                self.buf.len() - self.pos
            )))
        }
    }
}

fn decode_payload(kind: u8, body: &[u8]) -> Result<Message, WireError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let msg = match kind {
        KIND_CONFIG => {
            let max_trace_length = c.u32()?;
            let max_stack_size = c.u32()?;
            let max_input_bytes = c.u32()?;
            let fill = c.u8()?;
            let fill_byte = FillByte::new(fill)
                .ok_or_else(|| WireError::Invalid(format!("fill byte {fill} not in {{0, 85}}")))?;
            let n = c.u32()? as usize;
            let input = c.take(n)?.to_vec();
            Message::Config(ExecutionConfig {
                max_trace_length,
                max_stack_size,
                max_input_bytes,
                fill_byte,
                input,
            })
        }
        KIND_RESULT => {
            let code = c.u8()?;
            let termination = Termination::from_code(code)
                .ok_or_else(|| WireError::Invalid(format!("termination code {code}")))?;
            let n = c.u32()? as usize;
            let bytes_read = c.take(n)?.to_vec();
            let ntags = c.u32()? as usize;
            let type_tags = c
                .take(ntags)?
                .iter()
                .map(|&b| {
                    TypeTag::from_code(b)
                        .ok_or_else(|| WireError::Invalid(format!("type tag code {b}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let nrec = c.u32()? as usize;
            if nrec.saturating_mul(RECORD_SIZE) > body.len() - c.pos {
                return Err(WireError::Truncated {
                    needed: c.pos + nrec.saturating_mul(RECORD_SIZE),
                    available: body.len(),
                });
            }
            let mut trace = Vec::with_capacity(nrec);
            for _ in 0..nrec {
                let uid = c.u32()?;
                let ctx = c.u32()?;
                let direction = c.bool()?;
                let value = f64::from_bits(c.u64()?);
                if value.is_nan() {
                    return Err(WireError::Invalid("NaN branching value".into()));
                }
                let xor = c.bool()?;
                let nbytes = c.u32()?;
                trace.push(ConditionRecord {
                    id: ExecutionId { uid, ctx },
                    direction,
                    value,
                    xor,
                    nbytes,
                });
            }
            Message::Result(ExecutionResult {
                termination,
                bytes_read,
                type_tags,
                trace,
            })
        }
        other => return Err(WireError::UnknownKind(other)),
    };
    c.finish()?;
    Ok(msg)
}
