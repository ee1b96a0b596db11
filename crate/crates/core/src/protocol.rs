//! Codec for the fingerprint sensor's serial protocol.
//!
//! Wire layout (all integers little-endian):
//!
//! ```text
//! prefix(2) sid(1) did(1) cmd(2) len(2) payload(..) cks(2)
//! ```
//!
//! Command and command-response frames always carry a 16-byte zero-padded
//! payload, so they are exactly 26 bytes on the wire. Data frames carry
//! `len` payload bytes, 1 to 512. The checksum is the byte sum of
//! `sid..=payload` modulo 2^16.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const HEADER_LEN: usize = 8;
pub const CHECKSUM_LEN: usize = 2;
pub const COMMAND_PAYLOAD_LEN: usize = 16;
/// Encoded size of every command and command-response frame.
pub const COMMAND_FRAME_LEN: usize = HEADER_LEN + COMMAND_PAYLOAD_LEN + CHECKSUM_LEN;
pub const MAX_DATA_PAYLOAD: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Command,
    CommandResponse,
    Data,
    DataResponse,
}

impl FrameKind {
    pub const ALL: [FrameKind; 4] = [
        FrameKind::Command,
        FrameKind::CommandResponse,
        FrameKind::Data,
        FrameKind::DataResponse,
    ];

    pub const fn prefix(self) -> [u8; 2] {
        match self {
            FrameKind::Command => [0xAA, 0x55],
            FrameKind::CommandResponse => [0x55, 0xAA],
            FrameKind::Data => [0xA5, 0x5A],
            FrameKind::DataResponse => [0x5A, 0xA5],
        }
    }

    pub fn from_prefix(prefix: [u8; 2]) -> Option<FrameKind> {
        FrameKind::ALL.into_iter().find(|k| k.prefix() == prefix)
    }

    pub fn is_data(self) -> bool {
        matches!(self, FrameKind::Data | FrameKind::DataResponse)
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Command => "Command",
            FrameKind::CommandResponse => "CommandResponse",
            FrameKind::Data => "Data",
            FrameKind::DataResponse => "DataResponse",
        }
    }
}

impl FromStr for FrameKind {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FrameKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ProtocolError::Syntax(format!("unknown frame kind `{s}`")))
    }
}

/// 16-bit command opcode. Codes without a name still round-trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CommandWord(pub u16);

impl CommandWord {
    pub const TEST_CONNECTION: CommandWord = CommandWord(0x0001);
    pub const SET_BAUDRATE: CommandWord = CommandWord(0x0002);
    pub const GET_IMAGE: CommandWord = CommandWord(0x0020);
    pub const FINGER_DETECT: CommandWord = CommandWord(0x0021);
    pub const UP_IMAGE: CommandWord = CommandWord(0x0031);
    pub const GEN_TEMPLATE: CommandWord = CommandWord(0x0060);
    pub const UP_TEMPLATE: CommandWord = CommandWord(0x0061);
    pub const ACTUATE: CommandWord = CommandWord(0x00F0);

    pub fn name(self) -> Option<&'static str> {
        Some(match self {
            Self::TEST_CONNECTION => "TEST_CONNECTION",
            Self::SET_BAUDRATE => "SET_BAUDRATE",
            Self::GET_IMAGE => "GET_IMAGE",
            Self::FINGER_DETECT => "FINGER_DETECT",
            Self::UP_IMAGE => "UP_IMAGE",
            Self::GEN_TEMPLATE => "GEN_TEMPLATE",
            Self::UP_TEMPLATE => "UP_TEMPLATE",
            Self::ACTUATE => "ACTUATE",
            _ => return None,
        })
    }
}

impl fmt::Display for CommandWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(name) => f.write_str(name),
            None => write!(f, "0x{:04X}", self.0),
        }
    }
}

/// Status carried in bytes 0..2 of every command-response payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResultCode(pub u16);

impl ResultCode {
    pub const SUCCESS: ResultCode = ResultCode(0x0000);
    pub const FAIL: ResultCode = ResultCode(0x0001);
    pub const NO_FINGER: ResultCode = ResultCode(0x0002);
    pub const TIMEOUT: ResultCode = ResultCode(0x0003);
    pub const UPLOAD_DISABLED: ResultCode = ResultCode(0x0004);
    pub const BAD_CHECKSUM: ResultCode = ResultCode(0x0005);
    pub const BUSY: ResultCode = ResultCode(0x0006);

    pub fn name(self) -> Option<&'static str> {
        Some(match self {
            Self::SUCCESS => "SUCCESS",
            Self::FAIL => "FAIL",
            Self::NO_FINGER => "NO_FINGER",
            Self::TIMEOUT => "TIMEOUT",
            Self::UPLOAD_DISABLED => "UPLOAD_DISABLED",
            Self::BAD_CHECKSUM => "BAD_CHECKSUM",
            Self::BUSY => "BUSY",
            _ => return None,
        })
    }
}

impl fmt::Display for ResultCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(name) => f.write_str(name),
            None => write!(f, "0x{:04X}", self.0),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("data frame payload must be 1..=512 bytes, got {0}")]
    DataLength(usize),
    #[error("command payload holds at most 16 bytes, got {0}")]
    CommandLength(usize),
    #[error("frame too short: {0} bytes")]
    Truncated(usize),
    #[error("invalid frame prefix {0:02X?}")]
    BadPrefix([u8; 2]),
    #[error("frame length {actual} does not match header ({expected})")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("checksum mismatch: computed 0x{computed:04X}, frame carries 0x{carried:04X}")]
    Checksum { computed: u16, carried: u16 },
    #[error("{0}")]
    Syntax(String),
}

/// Arithmetic byte sum modulo 65536 over `sid..=payload`.
pub fn checksum(body: &[u8]) -> u16 {
    body.iter()
        .fold(0u16, |acc, &b| acc.wrapping_add(u16::from(b)))
}

/// Result of inspecting a frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameLength {
    Bytes(usize),
    /// The header cannot start a frame; drop a byte and look again.
    Resync,
}

/// Total encoded length announced by an 8-byte header.
pub fn expected_frame_length(header: &[u8]) -> FrameLength {
    if header.len() < HEADER_LEN {
        return FrameLength::Resync;
    }
    let Some(kind) = FrameKind::from_prefix([header[0], header[1]]) else {
        return FrameLength::Resync;
    };
    let len = usize::from(u16::from_le_bytes([header[6], header[7]]));
    if kind.is_data() {
        if (1..=MAX_DATA_PAYLOAD).contains(&len) {
            FrameLength::Bytes(HEADER_LEN + len + CHECKSUM_LEN)
        } else {
            FrameLength::Resync
        }
    } else if len <= COMMAND_PAYLOAD_LEN {
        FrameLength::Bytes(COMMAND_FRAME_LEN)
    } else {
        FrameLength::Resync
    }
}

/// One protocol packet.
///
/// For command-type frames `payload` is always the full 16-byte padded
/// block and `len` counts the bytes in use; for data frames
/// `payload.len() == len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    kind: FrameKind,
    sid: u8,
    did: u8,
    cmd: CommandWord,
    len: u16,
    payload: Vec<u8>,
}

impl Frame {
    /// Builds a frame of any kind from its used payload bytes.
    pub fn new(
        kind: FrameKind,
        sid: u8,
        did: u8,
        cmd: CommandWord,
        used: &[u8],
    ) -> Result<Frame, ProtocolError> {
        let payload = if kind.is_data() {
            if used.is_empty() || used.len() > MAX_DATA_PAYLOAD {
                return Err(ProtocolError::DataLength(used.len()));
            }
            used.to_vec()
        } else {
            if used.len() > COMMAND_PAYLOAD_LEN {
                return Err(ProtocolError::CommandLength(used.len()));
            }
            let mut padded = vec![0u8; COMMAND_PAYLOAD_LEN];
            padded[..used.len()].copy_from_slice(used);
            padded
        };
        Ok(Frame {
            kind,
            sid,
            did,
            cmd,
            len: used.len() as u16,
            payload,
        })
    }

    pub fn command(cmd: CommandWord, params: &[u8]) -> Result<Frame, ProtocolError> {
        Frame::new(FrameKind::Command, 0, 0, cmd, params)
    }

    /// Command response with the result code in payload bytes 0..2.
    pub fn response(cmd: CommandWord, result: ResultCode, extra: &[u8]) -> Frame {
        let mut used = result.0.to_le_bytes().to_vec();
        used.extend_from_slice(extra);
        Frame::new(FrameKind::CommandResponse, 0, 0, cmd, &used)
            .expect("response extras fit in 14 bytes")
    }

    pub fn data_response(cmd: CommandWord, data: &[u8]) -> Result<Frame, ProtocolError> {
        Frame::new(FrameKind::DataResponse, 0, 0, cmd, data)
    }

    pub fn kind(&self) -> FrameKind {
        self.kind
    }

    pub fn sid(&self) -> u8 {
        self.sid
    }

    pub fn did(&self) -> u8 {
        self.did
    }

    pub fn cmd(&self) -> CommandWord {
        self.cmd
    }

    pub fn len(&self) -> u16 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The full payload block as it appears on the wire.
    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// The first `len` payload bytes.
    pub fn used_payload(&self) -> &[u8] {
        &self.payload[..usize::from(self.len)]
    }

    /// Result code of a command response.
    pub fn result(&self) -> Option<ResultCode> {
        (self.kind == FrameKind::CommandResponse)
            .then(|| ResultCode(u16::from_le_bytes([self.payload[0], self.payload[1]])))
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + CHECKSUM_LEN
    }

    fn body(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(6 + self.payload.len());
        body.push(self.sid);
        body.push(self.did);
        body.extend_from_slice(&self.cmd.0.to_le_bytes());
        body.extend_from_slice(&self.len.to_le_bytes());
        body.extend_from_slice(&self.payload);
        body
    }

    pub fn checksum(&self) -> u16 {
        checksum(&self.body())
    }

    pub fn encode(&self) -> Vec<u8> {
        let body = self.body();
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.kind.prefix());
        out.extend_from_slice(&body);
        out.extend_from_slice(&checksum(&body).to_le_bytes());
        out
    }

    /// Decodes exactly one complete frame.
    pub fn decode(bytes: &[u8]) -> Result<Frame, ProtocolError> {
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(ProtocolError::Truncated(bytes.len()));
        }
        let prefix = [bytes[0], bytes[1]];
        let kind = FrameKind::from_prefix(prefix).ok_or(ProtocolError::BadPrefix(prefix))?;
        let len = usize::from(u16::from_le_bytes([bytes[6], bytes[7]]));
        let expected = match expected_frame_length(bytes) {
            FrameLength::Bytes(n) => n,
            FrameLength::Resync if kind.is_data() => return Err(ProtocolError::DataLength(len)),
            FrameLength::Resync => return Err(ProtocolError::CommandLength(len)),
        };
        if bytes.len() != expected {
            return Err(ProtocolError::LengthMismatch {
                expected,
                actual: bytes.len(),
            });
        }
        let body = &bytes[2..expected - CHECKSUM_LEN];
        let computed = checksum(body);
        let carried = u16::from_le_bytes([bytes[expected - 2], bytes[expected - 1]]);
        if computed != carried {
            return Err(ProtocolError::Checksum { computed, carried });
        }
        Ok(Frame {
            kind,
            sid: bytes[2],
            did: bytes[3],
            cmd: CommandWord(u16::from_le_bytes([bytes[4], bytes[5]])),
            len: len as u16,
            payload: bytes[HEADER_LEN..expected - CHECKSUM_LEN].to_vec(),
        })
    }
}

/// Free-function form of [`Frame::encode`].
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    frame.encode()
}

/// Textual form used by the `proto` CLI:
/// `Command sid=0x00 did=0x00 cmd=0x0020 len=0 payload= cks=0x0020`.
/// A trailing `# NAME` comment names known opcodes and result codes.
impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} sid=0x{:02X} did=0x{:02X} cmd=0x{:04X} len={} payload={} cks=0x{:04X}",
            self.kind.name(),
            self.sid,
            self.did,
            self.cmd.0,
            self.len,
            hex::encode(self.used_payload()),
            self.checksum()
        )?;
        if let Some(name) = self.cmd.name() {
            write!(f, " # {name}")?;
            if let Some(result) = self.result() {
                write!(f, " {result}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Frame {
    type Err = ProtocolError;

    /// Parses the [`Display`](fmt::Display) form. `cks` is ignored and
    /// recomputed; anything after `#` is a comment.
    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let line = line.split('#').next().unwrap_or_default();
        let mut tokens = line.split_whitespace();
        let kind: FrameKind = tokens
            .next()
            .ok_or_else(|| ProtocolError::Syntax("empty frame line".into()))?
            .parse()?;
        let (mut sid, mut did, mut cmd, mut len, mut payload) = (0u8, 0u8, None, None, Vec::new());
        for token in tokens {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| ProtocolError::Syntax(format!("expected key=value, got `{token}`")))?;
            match key {
                "sid" => sid = parse_int(value)? as u8,
                "did" => did = parse_int(value)? as u8,
                "cmd" => cmd = Some(CommandWord(parse_int(value)? as u16)),
                "len" => len = Some(parse_int(value)? as usize),
                "payload" => {
                    payload = hex::decode(value)
                        .map_err(|e| ProtocolError::Syntax(format!("payload: {e}")))?
                }
                "cks" => {}
                other => return Err(ProtocolError::Syntax(format!("unknown field `{other}`"))),
            }
        }
        let cmd = cmd.ok_or_else(|| ProtocolError::Syntax("missing cmd".into()))?;
        if let Some(len) = len {
            if len != payload.len() {
                return Err(ProtocolError::LengthMismatch {
                    expected: len,
                    actual: payload.len(),
                });
            }
        }
        Frame::new(kind, sid, did, cmd, &payload)
    }
}

fn parse_int(text: &str) -> Result<u32, ProtocolError> {
    let parsed = match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16),
        None => text.parse(),
    };
    parsed.map_err(|_| ProtocolError::Syntax(format!("bad integer `{text}`")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParseState {
    SeekPrefix,
    NeedHeader,
    NeedBody(usize),
}

/// Counters describing everything a parser has discarded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParserStats {
    pub frames: u64,
    pub bad_checksums: u64,
    pub skipped_bytes: u64,
}

/// Incremental frame reassembler for arbitrarily fragmented byte streams.
///
/// Only checksum-valid frames are emitted. A bad prefix, an impossible length
/// or a checksum mismatch drops the first byte of the candidate and the
/// search continues from the next byte.
#[derive(Debug, Clone)]
pub struct StreamParser {
    buf: Vec<u8>,
    start: usize,
    state: ParseState,
    stats: ParserStats,
}

impl Default for StreamParser {
    fn default() -> Self {
        Self::new()
    }
}

impl StreamParser {
    pub fn new() -> Self {
        Self {
            buf: Vec::new(),
            start: 0,
            state: ParseState::SeekPrefix,
            stats: ParserStats::default(),
        }
    }

    pub fn stats(&self) -> ParserStats {
        self.stats
    }

    /// Bytes held while waiting for the rest of a frame.
    pub fn pending(&self) -> usize {
        self.buf.len() - self.start
    }

    pub fn push(&mut self, chunk: &[u8]) -> Vec<Frame> {
        self.buf.extend_from_slice(chunk);
        let mut frames = Vec::new();
        loop {
            let avail = &self.buf[self.start..];
            match self.state {
                ParseState::SeekPrefix => {
                    let found = avail
                        .windows(2)
                        .position(|w| FrameKind::from_prefix([w[0], w[1]]).is_some());
                    match found {
                        Some(i) => {
                            self.skip(i);
                            self.state = ParseState::NeedHeader;
                        }
                        None => {
                            // Keep a lone trailing byte; it may open a prefix.
                            let keep = usize::from(
                                avail.last().is_some_and(|&b| {
                                    FrameKind::ALL.iter().any(|k| k.prefix()[0] == b)
                                }),
                            );
                            self.skip(avail.len() - keep);
                            break;
                        }
                    }
                }
                ParseState::NeedHeader => {
                    if avail.len() < HEADER_LEN {
                        break;
                    }
                    match expected_frame_length(&avail[..HEADER_LEN]) {
                        FrameLength::Bytes(n) => self.state = ParseState::NeedBody(n),
                        FrameLength::Resync => self.resync(),
                    }
                }
                ParseState::NeedBody(n) => {
                    if avail.len() < n {
                        break;
                    }
                    match Frame::decode(&avail[..n]) {
                        Ok(frame) => {
                            self.start += n;
                            self.stats.frames += 1;
                            self.state = ParseState::SeekPrefix;
                            frames.push(frame);
                        }
                        Err(_) => {
                            self.stats.bad_checksums += 1;
                            self.resync();
                        }
                    }
                }
            }
        }
        self.compact();
        frames
    }

    fn skip(&mut self, n: usize) {
        self.start += n;
        self.stats.skipped_bytes += n as u64;
    }

    fn resync(&mut self) {
        self.skip(1);
        self.state = ParseState::SeekPrefix;
    }

    fn compact(&mut self) {
        if self.start > 0 && (self.start >= 4096 || self.start == self.buf.len()) {
            self.buf.drain(..self.start);
            self.start = 0;
        }
    }
}
