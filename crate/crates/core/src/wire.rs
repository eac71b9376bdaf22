//! Binary request/reply protocol between a proxy and its model backend.
//!
//! Every message travels in one frame:
//!
//! ```text
//! +----------------------+--------+----------------------+
//! | payload_length (u32) | kind   | body                 |
//! | little-endian        | 1 byte | payload_length - 1   |
//! +----------------------+--------+----------------------+
//! ```
//!
//! Integers are little-endian and fixed width, reals are IEEE-754 binary64,
//! booleans are one byte (0 or 1), text is a `u32` byte length followed by
//! UTF-8 without terminator, and arrays are a `u32` element count followed by
//! the elements. A reply carries the request code with the high bit set and
//! always starts its body with a [`Status`] byte.
//!
//! There are no request identifiers. A connection carries at most one
//! outstanding request, so the next frame read is always the answer to the
//! last frame written.

use std::fmt;
use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::descriptor::{ScalarValue, VariableType};

/// Only protocol version understood by this implementation.
pub const PROTOCOL_VERSION: u16 = 1;

/// Upper bound on `payload_length`.
pub const MAX_FRAME_LEN: u32 = 16 * 1024 * 1024;

pub const REPLY_BIT: u8 = 0x80;

pub const DEFAULT_CALL_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    Handshake = 0x01,
    SetupExperiment = 0x10,
    EnterInitializationMode = 0x11,
    ExitInitializationMode = 0x12,
    DoStep = 0x13,
    SetReal = 0x14,
    SetInteger = 0x15,
    SetBoolean = 0x16,
    SetString = 0x17,
    GetReal = 0x18,
    GetInteger = 0x19,
    GetBoolean = 0x1A,
    GetString = 0x1B,
    Terminate = 0x1C,
    FreeInstance = 0x1D,
}

impl MessageKind {
    pub const ALL: [MessageKind; 15] = [
        MessageKind::Handshake,
        MessageKind::SetupExperiment,
        MessageKind::EnterInitializationMode,
        MessageKind::ExitInitializationMode,
        MessageKind::DoStep,
        MessageKind::SetReal,
        MessageKind::SetInteger,
        MessageKind::SetBoolean,
        MessageKind::SetString,
        MessageKind::GetReal,
        MessageKind::GetInteger,
        MessageKind::GetBoolean,
        MessageKind::GetString,
        MessageKind::Terminate,
        MessageKind::FreeInstance,
    ];

    /// The fourteen simulation calls, i.e. every kind except the handshake.
    pub const CALLS: [MessageKind; 14] = [
        MessageKind::SetupExperiment,
        MessageKind::EnterInitializationMode,
        MessageKind::ExitInitializationMode,
        MessageKind::DoStep,
        MessageKind::SetReal,
        MessageKind::SetInteger,
        MessageKind::SetBoolean,
        MessageKind::SetString,
        MessageKind::GetReal,
        MessageKind::GetInteger,
        MessageKind::GetBoolean,
        MessageKind::GetString,
        MessageKind::Terminate,
        MessageKind::FreeInstance,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn reply_code(self) -> u8 {
        self as u8 | REPLY_BIT
    }

    pub fn from_code(code: u8) -> Option<Self> {
        MessageKind::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn set_for(var_type: VariableType) -> Self {
        match var_type {
            VariableType::Real => MessageKind::SetReal,
            VariableType::Integer => MessageKind::SetInteger,
            VariableType::Boolean => MessageKind::SetBoolean,
            VariableType::Text => MessageKind::SetString,
        }
    }

    pub fn get_for(var_type: VariableType) -> Self {
        match var_type {
            VariableType::Real => MessageKind::GetReal,
            VariableType::Integer => MessageKind::GetInteger,
            VariableType::Boolean => MessageKind::GetBoolean,
            VariableType::Text => MessageKind::GetString,
        }
    }

    /// Variable type addressed by a SET_* or GET_* kind.
    pub fn data_type(self) -> Option<VariableType> {
        match self {
            MessageKind::SetReal | MessageKind::GetReal => Some(VariableType::Real),
            MessageKind::SetInteger | MessageKind::GetInteger => Some(VariableType::Integer),
            MessageKind::SetBoolean | MessageKind::GetBoolean => Some(VariableType::Boolean),
            MessageKind::SetString | MessageKind::GetString => Some(VariableType::Text),
            _ => None,
        }
    }

    pub fn is_get(self) -> bool {
        matches!(
            self,
            MessageKind::GetReal | MessageKind::GetInteger | MessageKind::GetBoolean | MessageKind::GetString
        )
    }

    pub fn is_set(self) -> bool {
        matches!(
            self,
            MessageKind::SetReal | MessageKind::SetInteger | MessageKind::SetBoolean | MessageKind::SetString
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Handshake => "HANDSHAKE",
            MessageKind::SetupExperiment => "SETUP_EXPERIMENT",
            MessageKind::EnterInitializationMode => "ENTER_INIT",
            MessageKind::ExitInitializationMode => "EXIT_INIT",
            MessageKind::DoStep => "DO_STEP",
            MessageKind::SetReal => "SET_REAL",
            MessageKind::SetInteger => "SET_INT",
            MessageKind::SetBoolean => "SET_BOOL",
            MessageKind::SetString => "SET_STRING",
            MessageKind::GetReal => "GET_REAL",
            MessageKind::GetInteger => "GET_INT",
            MessageKind::GetBoolean => "GET_BOOL",
            MessageKind::GetString => "GET_STRING",
            MessageKind::Terminate => "TERMINATE",
            MessageKind::FreeInstance => "FREE_INSTANCE",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Call status, numbered like the FMI 2.0 status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    Warning = 1,
    Discard = 2,
    Error = 3,
    Fatal = 4,
}

impl Status {
    pub const ALL: [Status; 5] = [
        Status::Ok,
        Status::Warning,
        Status::Discard,
        Status::Error,
        Status::Fatal,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Status::ALL.into_iter().find(|s| *s as u8 == code)
    }

    /// `Ok` and `Warning` let a run continue.
    pub fn is_success(self) -> bool {
        matches!(self, Status::Ok | Status::Warning)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A homogeneous array of values of one variable type.
#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    Real(Vec<f64>),
    Integer(Vec<i32>),
    Boolean(Vec<bool>),
    Text(Vec<String>),
}

impl Values {
    pub fn empty(var_type: VariableType) -> Self {
        match var_type {
            VariableType::Real => Values::Real(Vec::new()),
            VariableType::Integer => Values::Integer(Vec::new()),
            VariableType::Boolean => Values::Boolean(Vec::new()),
            VariableType::Text => Values::Text(Vec::new()),
        }
    }

    pub fn var_type(&self) -> VariableType {
        match self {
            Values::Real(_) => VariableType::Real,
            Values::Integer(_) => VariableType::Integer,
            Values::Boolean(_) => VariableType::Boolean,
            Values::Text(_) => VariableType::Text,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Values::Real(v) => v.len(),
            Values::Integer(v) => v.len(),
            Values::Boolean(v) => v.len(),
            Values::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Option<ScalarValue> {
        match self {
            Values::Real(v) => v.get(i).map(|x| ScalarValue::Real(*x)),
            Values::Integer(v) => v.get(i).map(|x| ScalarValue::Integer(*x)),
            Values::Boolean(v) => v.get(i).map(|x| ScalarValue::Boolean(*x)),
            Values::Text(v) => v.get(i).map(|x| ScalarValue::Text(x.clone())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ScalarValue> + '_ {
        (0..self.len()).map(|i| self.get(i).expect("index in range"))
    }

    /// Collects scalars of `var_type`; `None` if any scalar has another type.
    pub fn from_scalars<'a>(
        var_type: VariableType,
        scalars: impl IntoIterator<Item = &'a ScalarValue>,
    ) -> Option<Self> {
        let mut out = Values::empty(var_type);
        for s in scalars {
            match (&mut out, s) {
                (Values::Real(v), ScalarValue::Real(x)) => v.push(*x),
                (Values::Integer(v), ScalarValue::Integer(x)) => v.push(*x),
                (Values::Boolean(v), ScalarValue::Boolean(x)) => v.push(*x),
                (Values::Text(v), ScalarValue::Text(x)) => v.push(x.clone()),
                _ => return None,
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Handshake {
    pub version: u16,
    pub instance_name: String,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Handshake(Handshake),
    SetupExperiment {
        start_time: f64,
        stop_time: Option<f64>,
        tolerance: Option<f64>,
    },
    EnterInitializationMode,
    ExitInitializationMode,
    DoStep {
        current_time: f64,
        step_size: f64,
    },
    /// SET_REAL / SET_INT / SET_BOOL / SET_STRING, by the type of `values`.
    Set {
        vrs: Vec<u32>,
        values: Values,
    },
    /// GET_REAL / GET_INT / GET_BOOL / GET_STRING request.
    Get {
        var_type: VariableType,
        vrs: Vec<u32>,
    },
    Terminate,
    FreeInstance,
    /// Status-only reply to any request that is not a GET.
    Reply {
        request: MessageKind,
        status: Status,
    },
    /// Reply to a GET; the kind follows from the type of `values`.
    GetReply {
        status: Status,
        values: Values,
    },
}

impl Message {
    /// The request kind this message is, or answers.
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Handshake(_) => MessageKind::Handshake,
            Message::SetupExperiment { .. } => MessageKind::SetupExperiment,
            Message::EnterInitializationMode => MessageKind::EnterInitializationMode,
            Message::ExitInitializationMode => MessageKind::ExitInitializationMode,
            Message::DoStep { .. } => MessageKind::DoStep,
            Message::Set { values, .. } => MessageKind::set_for(values.var_type()),
            Message::Get { var_type, .. } => MessageKind::get_for(*var_type),
            Message::Terminate => MessageKind::Terminate,
            Message::FreeInstance => MessageKind::FreeInstance,
            Message::Reply { request, .. } => *request,
            Message::GetReply { values, .. } => MessageKind::get_for(values.var_type()),
        }
    }

    pub fn is_reply(&self) -> bool {
        matches!(self, Message::Reply { .. } | Message::GetReply { .. })
    }

    /// The kind byte carried on the wire.
    pub fn code(&self) -> u8 {
        if self.is_reply() {
            self.kind().reply_code()
        } else {
            self.kind().code()
        }
    }

    pub fn status(&self) -> Option<Status> {
        match self {
            Message::Reply { status, .. } | Message::GetReply { status, .. } => Some(*status),
            _ => None,
        }
    }

    pub fn set(vrs: Vec<u32>, values: Values) -> Self {
        Message::Set { vrs, values }
    }

    pub fn get(var_type: VariableType, vrs: Vec<u32>) -> Self {
        Message::Get { var_type, vrs }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("unknown message kind 0x{0:02X}")]
    UnknownKind(u8),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte cap")]
    FrameTooLarge(u64),
    #[error("frame has no kind byte")]
    EmptyFrame,
    #[error("{what} needs {needed} bytes but only {remaining} remain in the frame")]
    Truncated {
        what: &'static str,
        needed: u64,
        remaining: usize,
    },
    #[error("{0} unused bytes after message body")]
    TrailingBytes(usize),
    #[error("text field is not valid UTF-8")]
    InvalidUtf8,
    #[error("boolean byte 0x{0:02X} is neither 0 nor 1")]
    InvalidBool(u8),
    #[error("invalid status byte 0x{0:02X}")]
    InvalidStatus(u8),
    #[error("{kind} carries {vrs} value references but {values} values")]
    LengthMismatch {
        kind: MessageKind,
        vrs: usize,
        values: usize,
    },
    #[error("GET replies carry values; use Message::GetReply for {0}")]
    StatusOnlyGetReply(MessageKind),
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("expected reply code 0x{expected:02X}, received 0x{found:02X}")]
    KindMismatch { expected: u8, found: u8 },
    #[error("a request is already awaiting its reply")]
    RequestInFlight,
    #[error("connection closed by peer")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) -> Result<(), WireError> {
        let n = u32::try_from(n).map_err(|_| WireError::FrameTooLarge(n as u64))?;
        self.u32(n);
        Ok(())
    }
    fn text(&mut self, s: &str) -> Result<(), WireError> {
        self.len(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn vrs(&mut self, vrs: &[u32]) -> Result<(), WireError> {
        self.len(vrs.len())?;
        vrs.iter().for_each(|v| self.u32(*v));
        Ok(())
    }
    fn values(&mut self, values: &Values) -> Result<(), WireError> {
        self.len(values.len())?;
        match values {
            Values::Real(v) => v.iter().for_each(|x| self.f64(*x)),
            Values::Integer(v) => v.iter().for_each(|x| self.buf.extend_from_slice(&x.to_le_bytes())),
            Values::Boolean(v) => v.iter().for_each(|x| self.u8(u8::from(*x))),
            Values::Text(v) => {
                for s in v {
                    self.text(s)?;
                }
            }
        }
        Ok(())
    }
    fn optional_f64(&mut self, v: Option<f64>) {
        self.u8(u8::from(v.is_some()));
        self.f64(v.unwrap_or(0.0));
    }
}

/// Encodes one message into its complete frame, length prefix included.
pub fn encode_message(message: &Message) -> Result<Vec<u8>, WireError> {
    let mut enc = Encoder {
        buf: Vec::with_capacity(32),
    };
    enc.buf.extend_from_slice(&[0; 4]);
    enc.u8(message.code());
    match message {
        Message::Handshake(h) => {
            enc.u16(h.version);
            enc.text(&h.instance_name)?;
            enc.text(&h.token)?;
        }
        Message::SetupExperiment {
            start_time,
            stop_time,
            tolerance,
        } => {
            enc.f64(*start_time);
            enc.optional_f64(*stop_time);
            enc.optional_f64(*tolerance);
        }
        Message::DoStep {
            current_time,
            step_size,
        } => {
            enc.f64(*current_time);
            enc.f64(*step_size);
        }
        Message::Set { vrs, values } => {
            if vrs.len() != values.len() {
                return Err(WireError::LengthMismatch {
                    kind: message.kind(),
                    vrs: vrs.len(),
                    values: values.len(),
                });
            }
            enc.vrs(vrs)?;
            enc.values(values)?;
        }
        Message::Get { vrs, .. } => enc.vrs(vrs)?,
        Message::EnterInitializationMode
        | Message::ExitInitializationMode
        | Message::Terminate
        | Message::FreeInstance => {}
        Message::Reply { request, status } => {
            if request.is_get() {
                return Err(WireError::StatusOnlyGetReply(*request));
            }
            enc.u8(*status as u8);
        }
        Message::GetReply { status, values } => {
            enc.u8(*status as u8);
            enc.values(values)?;
        }
    }
    let payload_len = enc.buf.len() - 4;
    if payload_len as u64 > MAX_FRAME_LEN as u64 {
        return Err(WireError::FrameTooLarge(payload_len as u64));
    }
    enc.buf[..4].copy_from_slice(&(payload_len as u32).to_le_bytes());
    Ok(enc.buf)
}

/// Outcome of [`decode_message`] on a byte prefix of a stream.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// A full frame was present; `consumed` bytes belong to it.
    Complete { message: Message, consumed: usize },
    /// More bytes are needed before the first frame is complete.
    Incomplete,
}

/// Decodes the first frame in `bytes`.
///
/// Never looks beyond the declared frame. Any error is a fatal protocol
/// violation; the connection it came from must be closed.
pub fn decode_message(bytes: &[u8]) -> Result<Decoded, WireError> {
    let Some(prefix) = bytes.get(..4) else {
        return Ok(Decoded::Incomplete);
    };
    let payload_len = u32::from_le_bytes(prefix.try_into().expect("4 bytes"));
    if payload_len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(payload_len as u64));
    }
    if payload_len == 0 {
        return Err(WireError::EmptyFrame);
    }
    let frame_end = 4 + payload_len as usize;
    let Some(payload) = bytes.get(4..frame_end) else {
        return Ok(Decoded::Incomplete);
    };
    let message = decode_payload(payload)?;
    Ok(Decoded::Complete {
        message,
        consumed: frame_end,
    })
}

fn decode_payload(payload: &[u8]) -> Result<Message, WireError> {
    let code = payload[0];
    let kind = MessageKind::from_code(code & !REPLY_BIT).ok_or(WireError::UnknownKind(code))?;
    let mut cur = Cursor {
        bytes: &payload[1..],
        pos: 0,
    };
    let message = if code & REPLY_BIT != 0 {
        let status = cur.status()?;
        if kind.is_get() {
            let var_type = kind.data_type().expect("GET kinds carry a type");
            Message::GetReply {
                status,
                values: cur.values(var_type)?,
            }
        } else {
            Message::Reply {
                request: kind,
                status,
            }
        }
    } else {
        match kind {
            MessageKind::Handshake => Message::Handshake(Handshake {
                version: cur.u16()?,
                instance_name: cur.text()?,
                token: cur.text()?,
            }),
            MessageKind::SetupExperiment => Message::SetupExperiment {
                start_time: cur.f64()?,
                stop_time: cur.optional_f64()?,
                tolerance: cur.optional_f64()?,
            },
            MessageKind::EnterInitializationMode => Message::EnterInitializationMode,
            MessageKind::ExitInitializationMode => Message::ExitInitializationMode,
            MessageKind::DoStep => Message::DoStep {
                current_time: cur.f64()?,
                step_size: cur.f64()?,
            },
            MessageKind::Terminate => Message::Terminate,
            MessageKind::FreeInstance => Message::FreeInstance,
            k if k.is_set() => {
                let vrs = cur.vrs()?;
                let values = cur.values(k.data_type().expect("SET kinds carry a type"))?;
                if vrs.len() != values.len() {
                    return Err(WireError::LengthMismatch {
                        kind: k,
                        vrs: vrs.len(),
                        values: values.len(),
                    });
                }
                Message::Set { vrs, values }
            }
            k => Message::Get {
                var_type: k.data_type().expect("remaining kinds are GETs"),
                vrs: cur.vrs()?,
            },
        }
    };
    let trailing = cur.bytes.len() - cur.pos;
    if trailing != 0 {
        return Err(WireError::TrailingBytes(trailing));
    }
    Ok(message)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64, what: &'static str) -> Result<&'a [u8], WireError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining as u64 {
            return Err(WireError::Truncated {
                what,
                needed: n,
                remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(out)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8, WireError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2, "u16")?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8, "f64")?.try_into().expect("8 bytes")))
    }
    fn status(&mut self) -> Result<Status, WireError> {
        let b = self.u8("status")?;
        Status::from_code(b).ok_or(WireError::InvalidStatus(b))
    }
    fn boolean(&mut self) -> Result<bool, WireError> {
        match self.u8("boolean")? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(WireError::InvalidBool(b)),
        }
    }
    fn text(&mut self) -> Result<String, WireError> {
        let len = self.u32("text length")?;
        let raw = self.take(len as u64, "text")?;
        String::from_utf8(raw.to_vec()).map_err(|_| WireError::InvalidUtf8)
    }
    fn optional_f64(&mut self) -> Result<Option<f64>, WireError> {
        let defined = self.boolean()?;
        let value = self.f64()?;
        Ok(defined.then_some(value))
    }
    /// Reads an array count, refusing counts that cannot fit the frame.
    fn count(&mut self, min_elem: u64, what: &'static str) -> Result<usize, WireError> {
        let n = self.u32("array count")? as u64;
        let remaining = self.bytes.len() - self.pos;
        if n * min_elem > remaining as u64 {
            return Err(WireError::Truncated {
                what,
                needed: n * min_elem,
                remaining,
            });
        }
        Ok(n as usize)
    }
    fn vrs(&mut self) -> Result<Vec<u32>, WireError> {
        let n = self.count(4, "value references")?;
        (0..n).map(|_| self.u32("value reference")).collect()
    }
    fn values(&mut self, var_type: VariableType) -> Result<Values, WireError> {
        Ok(match var_type {
            VariableType::Real => {
                let n = self.count(8, "real values")?;
                Values::Real((0..n).map(|_| self.f64()).collect::<Result<_, _>>()?)
            }
            VariableType::Integer => {
                let n = self.count(4, "integer values")?;
                Values::Integer(
                    (0..n)
                        .map(|_| self.u32("integer").map(|v| v as i32))
                        .collect::<Result<_, _>>()?,
                )
            }
            VariableType::Boolean => {
                let n = self.count(1, "boolean values")?;
                Values::Boolean((0..n).map(|_| self.boolean()).collect::<Result<_, _>>()?)
            }
            VariableType::Text => {
                let n = self.count(4, "text values")?;
                Values::Text((0..n).map(|_| self.text()).collect::<Result<_, _>>()?)
            }
        })
    }
}

/// Incremental frame reassembly over an arbitrarily chunked byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Pops the next complete message, if any.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        match decode_message(&self.buf)? {
            Decoded::Complete { message, consumed } => {
                self.buf.drain(..consumed);
                Ok(Some(message))
            }
            Decoded::Incomplete => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Direction of one frame on a traced connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Wrote(u8),
    Read(u8),
}

/// A framed, strictly serial connection over TCP.
#[derive(Debug)]
pub struct Connection {
    stream: TcpStream,
    decoder: FrameDecoder,
    bytes_written: u64,
    in_flight: bool,
    trace: Option<Vec<TraceEvent>>,
}

impl Connection {
    pub fn new(stream: TcpStream) -> Self {
        // Frames are small and latency-bound; Nagle only adds delay here.
        let _ = stream.set_nodelay(true);
        Connection {
            stream,
            decoder: FrameDecoder::new(),
            bytes_written: 0,
            in_flight: false,
            trace: None,
        }
    }

    /// Starts recording the code of every frame written and read.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    pub fn stream(&self) -> &TcpStream {
        &self.stream
    }

    pub fn send(&mut self, message: &Message) -> Result<(), WireError> {
        let frame = encode_message(message)?;
        self.stream.write_all(&frame)?;
        self.bytes_written += frame.len() as u64;
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEvent::Wrote(message.code()));
        }
        Ok(())
    }

    /// Reads one message. `Ok(None)` means the peer closed cleanly between
    /// frames; a close inside a frame is [`WireError::Closed`].
    pub fn receive(&mut self, timeout: Option<Duration>) -> Result<Option<Message>, WireError> {
        let deadline = timeout.map(|t| (Instant::now() + t, t));
        let mut chunk = [0u8; 4096];
        loop {
            if let Some(message) = self.decoder.next_message()? {
                if let Some(trace) = &mut self.trace {
                    trace.push(TraceEvent::Read(message.code()));
                }
                return Ok(Some(message));
            }
            let read_timeout = match deadline {
                Some((deadline, total)) => {
                    let left = deadline.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(WireError::Timeout(total));
                    }
                    Some(left)
                }
                None => None,
            };
            self.stream.set_read_timeout(read_timeout)?;
            match self.stream.read(&mut chunk) {
                Ok(0) if self.decoder.buffered() == 0 => return Ok(None),
                Ok(0) => return Err(WireError::Closed),
                Ok(n) => self.decoder.push(&chunk[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    let total = deadline.map(|(_, t)| t).unwrap_or_default();
                    return Err(WireError::Timeout(total));
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Sends `request` and waits for exactly one reply with the matching code.
    pub fn request_reply(&mut self, request: &Message, timeout: Duration) -> Result<Message, WireError> {
        if self.in_flight {
            return Err(WireError::RequestInFlight);
        }
        self.send(request)?;
        self.in_flight = true;
        let reply = self.receive(Some(timeout))?.ok_or(WireError::Closed)?;
        let expected = request.kind().reply_code();
        if reply.code() != expected {
            return Err(WireError::KindMismatch {
                expected,
                found: reply.code(),
            });
        }
        self.in_flight = false;
        Ok(reply)
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}
