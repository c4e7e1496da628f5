//! Framed client/server protocol for federated rounds over TCP.
//!
//! ```text
//! "FSEG" | u8 version=1 | u8 type | u32 round | u64 payload len | payload | u32 CRC-32
//! ```
//! Integers are little-endian; the CRC covers header and payload.
//!
//! A session is `HELLO -> ASSIGN`, then per round `BROADCAST -> UPDATE`,
//! then `DONE` carrying the final weights. Any failure sends `ABORT` to
//! every client and no partial aggregate is formed.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::weights;

pub const MAGIC: &[u8; 4] = b"FSEG";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
pub const CRC_LEN: usize = 4;
pub const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the limit")]
    PayloadTooLarge(u64),
    #[error("frame length {actual} does not match declared {declared}")]
    LengthMismatch { declared: u64, actual: u64 },
    #[error("CRC mismatch: frame says {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("expected {expected:?}, got {got:?}")]
    Unexpected { expected: MsgType, got: MsgType },
    #[error("message for round {got} while at round {expected}")]
    RoundMismatch { expected: u32, got: u32 },
    #[error("client id {0} joined twice")]
    DuplicateClient(u32),
    #[error("handshake timed out with {connected} of {expected} clients")]
    HandshakeTimeout { connected: usize, expected: usize },
    #[error("malformed payload: {0}")]
    BadPayload(String),
    #[error("session aborted: {0}")]
    Aborted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Assign = 2,
    Broadcast = 3,
    Update = 4,
    Done = 5,
    Abort = 6,
}

impl TryFrom<u8> for MsgType {
    type Error = ProtocolError;

    fn try_from(v: u8) -> std::result::Result<Self, ProtocolError> {
        Ok(match v {
            1 => MsgType::Hello,
            2 => MsgType::Assign,
            3 => MsgType::Broadcast,
            4 => MsgType::Update,
            5 => MsgType::Done,
            6 => MsgType::Abort,
            other => return Err(ProtocolError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MsgType,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(kind: MsgType, round: u32, payload: Vec<u8>) -> Self {
        Message { kind, round, payload }
    }
}

pub fn encode_frame(msg: &Message) -> std::result::Result<Vec<u8>, ProtocolError> {
    let len = msg.payload.len() as u64;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(len));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + msg.payload.len() + CRC_LEN);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&msg.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Header {
    kind: u8,
    round: u32,
    payload_len: u64,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> std::result::Result<Header, ProtocolError> {
    let magic: [u8; 4] = h[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    if h[4] != VERSION {
        return Err(ProtocolError::UnsupportedVersion(h[4]));
    }
    let payload_len = u64::from_le_bytes(h[10..18].try_into().unwrap());
    if payload_len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(payload_len));
    }
    Ok(Header {
        kind: h[5],
        round: u32::from_le_bytes(h[6..10].try_into().unwrap()),
        payload_len,
    })
}

fn finish(header: &[u8], header_info: Header, payload: Vec<u8>, crc_bytes: &[u8]) -> std::result::Result<Message, ProtocolError> {
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(header);
    hasher.update(&payload);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(ProtocolError::CrcMismatch { stored, computed });
    }
    Ok(Message {
        kind: MsgType::try_from(header_info.kind)?,
        round: header_info.round,
        payload,
    })
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> std::result::Result<Message, ProtocolError> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(ProtocolError::Truncated);
    }
    let header: &[u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().unwrap();
    let info = parse_header(header)?;
    let actual = (bytes.len() - HEADER_LEN - CRC_LEN) as u64;
    if actual != info.payload_len {
        if actual < info.payload_len {
            return Err(ProtocolError::Truncated);
        }
        return Err(ProtocolError::LengthMismatch { declared: info.payload_len, actual });
    }
    let end = HEADER_LEN + actual as usize;
    finish(header, info, bytes[HEADER_LEN..end].to_vec(), &bytes[end..])
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Protocol(ProtocolError::Truncated),
        _ => Error::Io(e),
    })
}

/// Reads one frame from a stream. The payload buffer grows as bytes
/// arrive, so a forged length cannot force a huge allocation.
pub fn read_frame(r: &mut impl Read) -> Result<Message> {
    let mut header = [0u8; HEADER_LEN];
    read_exact_or_truncated(r, &mut header)?;
    let info = parse_header(&header)?;
    let mut payload = Vec::with_capacity(info.payload_len.min(1 << 20) as usize);
    let got = r.by_ref().take(info.payload_len).read_to_end(&mut payload)?;
    if (got as u64) < info.payload_len {
        return Err(ProtocolError::Truncated.into());
    }
    let mut crc = [0u8; CRC_LEN];
    read_exact_or_truncated(r, &mut crc)?;
    Ok(finish(&header, info, payload, &crc)?)
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()?;
    Ok(())
}

/// What a client announces when it joins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientHello {
    pub client_id: u32,
    /// Local dataset size in frames.
    pub sample_count: u64,
}

impl ClientHello {
    pub fn to_payload(self) -> Vec<u8> {
        let mut p = self.client_id.to_le_bytes().to_vec();
        p.extend_from_slice(&self.sample_count.to_le_bytes());
        p
    }

    pub fn from_payload(p: &[u8]) -> std::result::Result<Self, ProtocolError> {
        if p.len() != 12 {
            return Err(ProtocolError::BadPayload(format!("HELLO payload of {} bytes", p.len())));
        }
        Ok(ClientHello {
            client_id: u32::from_le_bytes(p[0..4].try_into().unwrap()),
            sample_count: u64::from_le_bytes(p[4..12].try_into().unwrap()),
        })
    }
}

/// Server's reply to HELLO.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub client_id: u32,
    pub n_clients: u32,
    pub rounds: u32,
}

impl Assignment {
    pub fn to_payload(self) -> Vec<u8> {
        [self.client_id, self.n_clients, self.rounds].iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_payload(p: &[u8]) -> std::result::Result<Self, ProtocolError> {
        if p.len() != 12 {
            return Err(ProtocolError::BadPayload(format!("ASSIGN payload of {} bytes", p.len())));
        }
        let v = |i: usize| u32::from_le_bytes(p[i * 4..i * 4 + 4].try_into().unwrap());
        Ok(Assignment { client_id: v(0), n_clients: v(1), rounds: v(2) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Joining,
    Waiting,
    Training,
    Closed,
}

/// Client-side protocol state machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub client_id: u32,
    pub last_round_seen: u32,
    pub phase: Phase,
}

impl SessionState {
    pub fn new(client_id: u32) -> Self {
        SessionState { client_id, last_round_seen: 0, phase: Phase::Joining }
    }

    /// Validates and applies an incoming server message.
    pub fn on_receive(&mut self, msg: &Message) -> std::result::Result<(), ProtocolError> {
        if msg.kind == MsgType::Abort {
            self.phase = Phase::Closed;
            return Err(ProtocolError::Aborted(String::from_utf8_lossy(&msg.payload).into_owned()));
        }
        match (self.phase, msg.kind) {
            (Phase::Joining, MsgType::Assign) => self.phase = Phase::Waiting,
            (Phase::Waiting, MsgType::Broadcast) => {
                if msg.round <= self.last_round_seen {
                    return Err(ProtocolError::RoundMismatch { expected: self.last_round_seen + 1, got: msg.round });
                }
                self.last_round_seen = msg.round;
                self.phase = Phase::Training;
            }
            (Phase::Waiting, MsgType::Done) => {
                if msg.round != self.last_round_seen {
                    return Err(ProtocolError::RoundMismatch { expected: self.last_round_seen, got: msg.round });
                }
                self.phase = Phase::Closed;
            }
            (phase, got) => {
                let expected = match phase {
                    Phase::Joining => MsgType::Assign,
                    Phase::Waiting => MsgType::Broadcast,
                    Phase::Training | Phase::Closed => MsgType::Abort,
                };
                return Err(ProtocolError::Unexpected { expected, got });
            }
        }
        Ok(())
    }

    /// Checks that an UPDATE for `round` may be sent now.
    pub fn on_send_update(&mut self, round: u32) -> std::result::Result<(), ProtocolError> {
        if self.phase != Phase::Training {
            return Err(ProtocolError::Unexpected { expected: MsgType::Broadcast, got: MsgType::Update });
        }
        if round != self.last_round_seen {
            return Err(ProtocolError::RoundMismatch { expected: self.last_round_seen, got: round });
        }
        self.phase = Phase::Waiting;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub n_clients: usize,
    pub rounds: u32,
    pub handshake_timeout: Duration,
    /// Limit on waiting for any single client message after the handshake.
    pub io_timeout: Option<Duration>,
}

struct Session {
    hello: ClientHello,
    stream: TcpStream,
}

fn expect(msg: Message, kind: MsgType) -> Result<Message> {
    if msg.kind == MsgType::Abort {
        return Err(ProtocolError::Aborted(String::from_utf8_lossy(&msg.payload).into_owned()).into());
    }
    if msg.kind != kind {
        return Err(ProtocolError::Unexpected { expected: kind, got: msg.kind }.into());
    }
    Ok(msg)
}

fn accept_clients(listener: &TcpListener, opts: &ServerOptions) -> Result<Vec<Session>> {
    let deadline = Instant::now() + opts.handshake_timeout;
    let mut sessions: Vec<Session> = Vec::with_capacity(opts.n_clients);
    listener.set_nonblocking(true)?;
    let result: Result<()> = (|| {
        while sessions.len() < opts.n_clients {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    stream.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1))))?;
                    let hello = ClientHello::from_payload(&expect(read_frame(&mut stream)?, MsgType::Hello)?.payload)?;
                    if sessions.iter().any(|s| s.hello.client_id == hello.client_id) {
                        let _ = write_frame(&mut stream, &Message::new(MsgType::Abort, 0, b"duplicate client id".to_vec()));
                        return Err(ProtocolError::DuplicateClient(hello.client_id).into());
                    }
                    stream.set_read_timeout(opts.io_timeout)?;
                    sessions.push(Session { hello, stream });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(ProtocolError::HandshakeTimeout { connected: sessions.len(), expected: opts.n_clients }.into());
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    })();
    listener.set_nonblocking(false)?;
    match result {
        Ok(()) => {
            sessions.sort_by_key(|s| s.hello.client_id);
            Ok(sessions)
        }
        Err(e) => {
            abort_all(&mut sessions, &e.to_string());
            Err(e)
        }
    }
}

fn abort_all(sessions: &mut [Session], reason: &str) {
    for s in sessions {
        let _ = write_frame(&mut s.stream, &Message::new(MsgType::Abort, 0, reason.as_bytes().to_vec()));
    }
}

/// Serves one federated session. `aggregate` receives the round number,
/// the client announcements and their updates, both ordered by client id.
pub fn run_server<F>(listener: &TcpListener, opts: &ServerOptions, initial: ModelParams, mut aggregate: F) -> Result<ModelParams>
where
    F: FnMut(u32, &[ClientHello], Vec<ModelParams>) -> Result<ModelParams>,
{
    if opts.n_clients == 0 {
        return Err(Error::config("server needs at least one client"));
    }
    let mut sessions = accept_clients(listener, opts)?;
    let hellos: Vec<ClientHello> = sessions.iter().map(|s| s.hello).collect();
    let result: Result<ModelParams> = (|| {
        for s in sessions.iter_mut() {
            let assign = Assignment { client_id: s.hello.client_id, n_clients: opts.n_clients as u32, rounds: opts.rounds };
            write_frame(&mut s.stream, &Message::new(MsgType::Assign, 0, assign.to_payload()))?;
        }
        let mut global = initial;
        for round in 1..=opts.rounds {
            let bytes = weights::encode(&global);
            for s in sessions.iter_mut() {
                write_frame(&mut s.stream, &Message::new(MsgType::Broadcast, round, bytes.clone()))?;
            }
            let mut updates = Vec::with_capacity(sessions.len());
            for s in sessions.iter_mut() {
                let msg = expect(read_frame(&mut s.stream)?, MsgType::Update)?;
                if msg.round != round {
                    return Err(ProtocolError::RoundMismatch { expected: round, got: msg.round }.into());
                }
                let params = weights::decode(&msg.payload)?;
                global.check_layout(&params)?;
                updates.push(params);
            }
            global = aggregate(round, &hellos, updates)?;
        }
        let bytes = weights::encode(&global);
        for s in sessions.iter_mut() {
            write_frame(&mut s.stream, &Message::new(MsgType::Done, opts.rounds, bytes.clone()))?;
        }
        Ok(global)
    })();
    if let Err(e) = &result {
        abort_all(&mut sessions, &e.to_string());
    }
    result
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// How long to keep retrying the initial connection.
    pub connect_timeout: Duration,
    pub io_timeout: Option<Duration>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions { connect_timeout: Duration::from_secs(10), io_timeout: None }
    }
}

fn connect(addr: impl ToSocketAddrs + Copy, timeout: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e.into()),
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

/// Runs one client session. `local_update` maps the broadcast global
/// weights of a round to this client's updated weights. Returns the final
/// global weights from DONE.
pub fn run_client<A, F>(addr: A, hello: ClientHello, opts: &ClientOptions, mut local_update: F) -> Result<ModelParams>
where
    A: ToSocketAddrs + Copy,
    F: FnMut(u32, ModelParams) -> Result<ModelParams>,
{
    let mut stream = connect(addr, opts.connect_timeout)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(opts.io_timeout)?;
    let mut state = SessionState::new(hello.client_id);
    write_frame(&mut stream, &Message::new(MsgType::Hello, 0, hello.to_payload()))?;
    loop {
        let msg = read_frame(&mut stream)?;
        state.on_receive(&msg)?;
        match msg.kind {
            MsgType::Assign => {
                let a = Assignment::from_payload(&msg.payload)?;
                if a.client_id != hello.client_id {
                    return Err(ProtocolError::BadPayload(format!("assigned id {} but joined as {}", a.client_id, hello.client_id)).into());
                }
            }
            MsgType::Broadcast => {
                let global = weights::decode(&msg.payload)?;
                let updated = match local_update(msg.round, global) {
                    Ok(p) => p,
                    Err(e) => {
                        let _ = write_frame(&mut stream, &Message::new(MsgType::Abort, msg.round, e.to_string().into_bytes()));
                        return Err(e);
                    }
                };
                state.on_send_update(msg.round)?;
                write_frame(&mut stream, &Message::new(MsgType::Update, msg.round, weights::encode(&updated)))?;
            }
            MsgType::Done => return weights::decode(&msg.payload),
            _ => unreachable!("rejected by the session state"),
        }
    }
}
