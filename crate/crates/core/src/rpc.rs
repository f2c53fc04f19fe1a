//! Policy wire protocol, transports and the policy server.
//!
//! Every frame is `u32 LE payload length | u8 type | u32 LE seq | payload`.
//!
//! | type      | id | payload                                                        |
//! |-----------|----|----------------------------------------------------------------|
//! | HELLO     | 1  | u16 version, u32 horizon, u32 replan, 32B obs digest, 32B act digest, u32 len + obs schema JSON, u32 len + act schema JSON |
//! | HELLO_ACK | 2  | u16 version, u32 horizon, 32B obs digest, 32B act digest        |
//! | OBS       | 3  | u64 step index, observation channels                           |
//! | ACT       | 4  | u32 count, then `count` action channel sets                     |
//! | RESET     | 5  | u64 seed                                                       |
//! | CLOSE     | 6  | empty                                                          |
//! | ERR       | 7  | UTF-8 message                                                  |
//!
//! Channel sets use the layout of [`crate::codec`]. The client numbers its
//! frames 0, 1, 2, …; HELLO_ACK and ACT echo the sequence number of the
//! frame they answer.

use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::codec::{decode_channels, encode_channels, CodecError, Reader};
use crate::env::EnvError;
use crate::policy::Policy;
use crate::space::{Action, Observation, SpaceDescriptor};

pub const PROTOCOL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 9;
pub const MAX_PAYLOAD: usize = 64 << 20;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
const INPROC_CAPACITY: usize = 64;
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum RpcError {
    #[error("payload of {0} bytes exceeds the 64 MiB limit")]
    Oversize(usize),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    TruncatedFrame { needed: usize, available: usize },
    #[error("transport closed")]
    TransportClosed,
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("remote error: {0}")]
    Remote(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("bad endpoint {0:?} (expected tcp://host:port or inproc://name)")]
    BadEndpoint(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    HelloAck = 2,
    Obs = 3,
    Act = 4,
    Reset = 5,
    Close = 6,
    Err = 7,
}

impl TryFrom<u8> for MsgType {
    type Error = RpcError;
    fn try_from(v: u8) -> Result<Self, RpcError> {
        Ok(match v {
            1 => MsgType::Hello,
            2 => MsgType::HelloAck,
            3 => MsgType::Obs,
            4 => MsgType::Act,
            5 => MsgType::Reset,
            6 => MsgType::Close,
            7 => MsgType::Err,
            other => return Err(RpcError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MsgType,
    pub seq: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: MsgType, seq: u32, payload: Vec<u8>) -> Self {
        Self { kind, seq, payload }
    }

    pub fn close(seq: u32) -> Self {
        Self::new(MsgType::Close, seq, Vec::new())
    }

    pub fn error(seq: u32, message: &str) -> Self {
        Self::new(MsgType::Err, seq, message.as_bytes().to_vec())
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, RpcError> {
    if frame.payload.len() > MAX_PAYLOAD {
        return Err(RpcError::Oversize(frame.payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + frame.payload.len());
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.push(frame.kind as u8);
    out.extend_from_slice(&frame.seq.to_le_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(usize, MsgType, u32), RpcError> {
    let len = u32::from_le_bytes(h[..4].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(RpcError::Oversize(len));
    }
    let kind = MsgType::try_from(h[4])?;
    Ok((len, kind, u32::from_le_bytes(h[5..].try_into().unwrap())))
}

/// Decodes one frame from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), RpcError> {
    if bytes.len() < HEADER_LEN {
        return Err(RpcError::TruncatedFrame { needed: HEADER_LEN, available: bytes.len() });
    }
    let (len, kind, seq) = parse_header(bytes[..HEADER_LEN].try_into().unwrap())?;
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Err(RpcError::TruncatedFrame { needed: total, available: bytes.len() });
    }
    Ok((Frame::new(kind, seq, bytes[HEADER_LEN..total].to_vec()), total))
}

/// In-order, lossless frame pipe. `send` blocks under backpressure.
pub trait Transport: Send {
    fn send(&mut self, frame: &Frame) -> Result<(), RpcError>;
    fn recv(&mut self, timeout: Duration) -> Result<Frame, RpcError>;
}

impl Transport for Box<dyn Transport> {
    fn send(&mut self, frame: &Frame) -> Result<(), RpcError> {
        (**self).send(frame)
    }
    fn recv(&mut self, timeout: Duration) -> Result<Frame, RpcError> {
        (**self).recv(timeout)
    }
}

/// One end of an in-process pipe carrying encoded frames through bounded
/// queues.
pub struct InprocTransport {
    tx: SyncSender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl InprocTransport {
    pub fn pair(capacity: usize) -> (Self, Self) {
        let (a_tx, a_rx) = mpsc::sync_channel(capacity);
        let (b_tx, b_rx) = mpsc::sync_channel(capacity);
        (Self { tx: a_tx, rx: b_rx }, Self { tx: b_tx, rx: a_rx })
    }
}

impl Transport for InprocTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), RpcError> {
        self.tx.send(encode_frame(frame)?).map_err(|_| RpcError::TransportClosed)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Frame, RpcError> {
        let bytes = self.rx.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => RpcError::Timeout(timeout),
            RecvTimeoutError::Disconnected => RpcError::TransportClosed,
        })?;
        let (frame, used) = decode_frame(&bytes)?;
        if used != bytes.len() {
            return Err(RpcError::Protocol("inproc message holds more than one frame".into()));
        }
        Ok(frame)
    }
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Result<Self, RpcError> {
        stream.set_nodelay(true)?;
        stream.set_nonblocking(false)?;
        Ok(Self { stream })
    }

    pub fn connect(addr: &str) -> Result<Self, RpcError> {
        let stream = TcpStream::connect(addr).map_err(|e| RpcError::ConnectionRefused(format!("{addr}: {e}")))?;
        Self::new(stream)
    }
}

fn io_to_rpc(e: std::io::Error, timeout: Duration) -> RpcError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => RpcError::Timeout(timeout),
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::BrokenPipe | ErrorKind::ConnectionAborted => {
            RpcError::TransportClosed
        }
        _ => RpcError::Io(e),
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), RpcError> {
        let bytes = encode_frame(frame)?;
        self.stream.write_all(&bytes).map_err(|e| io_to_rpc(e, Duration::ZERO))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Frame, RpcError> {
        self.stream.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        let mut header = [0u8; HEADER_LEN];
        self.stream.read_exact(&mut header).map_err(|e| io_to_rpc(e, timeout))?;
        let (len, kind, seq) = parse_header(&header)?;
        let mut payload = vec![0u8; len];
        // A frame whose header arrived is read to the end regardless of the deadline.
        self.stream.set_read_timeout(Some(DEFAULT_TIMEOUT))?;
        self.stream.read_exact(&mut payload).map_err(|e| io_to_rpc(e, DEFAULT_TIMEOUT))?;
        Ok(Frame::new(kind, seq, payload))
    }
}

/// Fault injection: delays every write by a seeded random amount up to
/// `max_delay`. Frames are never dropped.
pub struct DelayTransport<T> {
    inner: T,
    max_delay: Duration,
    rng: rand_chacha::ChaCha8Rng,
}

impl<T: Transport> DelayTransport<T> {
    pub fn new(inner: T, max_delay: Duration, seed: u64) -> Self {
        Self { inner, max_delay, rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl<T: Transport> Transport for DelayTransport<T> {
    fn send(&mut self, frame: &Frame) -> Result<(), RpcError> {
        let micros = self.rng.gen_range(0..=self.max_delay.as_micros() as u64);
        std::thread::sleep(Duration::from_micros(micros));
        self.inner.send(frame)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Frame, RpcError> {
        self.inner.recv(timeout)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Inproc(String),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self, RpcError> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.rsplit_once(':').is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok()) {
                return Ok(Endpoint::Tcp(addr.to_string()));
            }
        } else if let Some(name) = s.strip_prefix("inproc://") {
            if !name.is_empty() {
                return Ok(Endpoint::Inproc(name.to_string()));
            }
        }
        Err(RpcError::BadEndpoint(s.to_string()))
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Inproc(n) => write!(f, "inproc://{n}"),
        }
    }
}

type InprocRegistry = Mutex<HashMap<String, SyncSender<InprocTransport>>>;

fn inproc_registry() -> &'static InprocRegistry {
    static REGISTRY: OnceLock<InprocRegistry> = OnceLock::new();
    REGISTRY.get_or_init(Default::default)
}

pub fn connect(endpoint: &str) -> Result<Box<dyn Transport>, RpcError> {
    match Endpoint::parse(endpoint)? {
        Endpoint::Tcp(addr) => Ok(Box::new(TcpTransport::connect(&addr)?)),
        Endpoint::Inproc(name) => {
            let registry = inproc_registry().lock().unwrap();
            let listener = registry.get(&name).ok_or_else(|| RpcError::ConnectionRefused(endpoint.to_string()))?;
            let (client, server) = InprocTransport::pair(INPROC_CAPACITY);
            listener.send(server).map_err(|_| RpcError::ConnectionRefused(endpoint.to_string()))?;
            Ok(Box::new(client))
        }
    }
}

pub enum Listener {
    Tcp(TcpListener),
    Inproc { name: String, rx: Receiver<InprocTransport> },
}

impl Listener {
    pub fn bind(endpoint: &str) -> Result<Self, RpcError> {
        match Endpoint::parse(endpoint)? {
            Endpoint::Tcp(addr) => {
                let l = TcpListener::bind(&addr)?;
                l.set_nonblocking(true)?;
                Ok(Listener::Tcp(l))
            }
            Endpoint::Inproc(name) => {
                let mut registry = inproc_registry().lock().unwrap();
                if registry.contains_key(&name) {
                    return Err(RpcError::Io(std::io::Error::new(ErrorKind::AddrInUse, format!("inproc://{name}"))));
                }
                let (tx, rx) = mpsc::sync_channel(16);
                registry.insert(name.clone(), tx);
                Ok(Listener::Inproc { name, rx })
            }
        }
    }

    /// The bound endpoint, with the actual port for `tcp://host:0`.
    pub fn endpoint(&self) -> Result<Endpoint, RpcError> {
        Ok(match self {
            Listener::Tcp(l) => Endpoint::Tcp(l.local_addr()?.to_string()),
            Listener::Inproc { name, .. } => Endpoint::Inproc(name.clone()),
        })
    }

    /// Waits up to `timeout` for a connection.
    pub fn accept(&self, timeout: Duration) -> Result<Option<Box<dyn Transport>>, RpcError> {
        match self {
            Listener::Tcp(l) => {
                let deadline = Instant::now() + timeout;
                loop {
                    match l.accept() {
                        Ok((stream, _)) => return Ok(Some(Box::new(TcpTransport::new(stream)?))),
                        Err(e) if e.kind() == ErrorKind::WouldBlock => {
                            if Instant::now() >= deadline {
                                return Ok(None);
                            }
                            std::thread::sleep(Duration::from_millis(2));
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            Listener::Inproc { rx, .. } => match rx.recv_timeout(timeout) {
                Ok(t) => Ok(Some(Box::new(t))),
                Err(RecvTimeoutError::Timeout) => Ok(None),
                Err(RecvTimeoutError::Disconnected) => Err(RpcError::TransportClosed),
            },
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        if let Listener::Inproc { name, .. } = self {
            if let Ok(mut registry) = inproc_registry().lock() {
                registry.remove(name);
            }
        }
    }
}

/// Parameters agreed during the handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionConfig {
    pub protocol_version: u16,
    pub observation_digest: [u8; 32],
    pub action_digest: [u8; 32],
    pub horizon: usize,
    pub replan_every: usize,
}

impl SessionConfig {
    pub fn new(observation: &SpaceDescriptor, action: &SpaceDescriptor, horizon: usize, replan_every: usize) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION,
            observation_digest: observation.digest(),
            action_digest: action.digest(),
            horizon: horizon.max(1),
            replan_every: replan_every.clamp(1, horizon.max(1)),
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader<'_>, what: &str) -> Result<String, RpcError> {
    let n = r.u32(what)? as usize;
    String::from_utf8(r.take(n, what)?.to_vec()).map_err(|_| RpcError::Protocol(format!("{what} is not UTF-8")))
}

fn digest(r: &mut Reader<'_>, what: &str) -> Result<[u8; 32], RpcError> {
    Ok(r.take(32, what)?.try_into().unwrap())
}

pub struct Hello {
    pub session: SessionConfig,
    pub observation_space: SpaceDescriptor,
    pub action_space: SpaceDescriptor,
}

pub fn encode_hello(h: &Hello) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&h.session.protocol_version.to_le_bytes());
    out.extend_from_slice(&(h.session.horizon as u32).to_le_bytes());
    out.extend_from_slice(&(h.session.replan_every as u32).to_le_bytes());
    out.extend_from_slice(&h.session.observation_digest);
    out.extend_from_slice(&h.session.action_digest);
    put_str(&mut out, &h.observation_space.canonical_json());
    put_str(&mut out, &h.action_space.canonical_json());
    out
}

pub fn decode_hello(payload: &[u8]) -> Result<Hello, RpcError> {
    let mut r = Reader::new(payload);
    let protocol_version = r.u16("version")?;
    let horizon = r.u32("horizon")? as usize;
    let replan_every = r.u32("replan")? as usize;
    let observation_digest = digest(&mut r, "observation digest")?;
    let action_digest = digest(&mut r, "action digest")?;
    let parse = |s: String, what: &str| {
        serde_json::from_str::<SpaceDescriptor>(&s).map_err(|e| RpcError::Protocol(format!("{what} schema: {e}")))
    };
    let observation_space = parse(get_str(&mut r, "observation schema")?, "observation")?;
    let action_space = parse(get_str(&mut r, "action schema")?, "action")?;
    r.finish()?;
    Ok(Hello {
        session: SessionConfig { protocol_version, observation_digest, action_digest, horizon, replan_every },
        observation_space,
        action_space,
    })
}

pub fn encode_obs(space: &SpaceDescriptor, obs: &Observation) -> Result<Vec<u8>, RpcError> {
    let mut out = obs.step.to_le_bytes().to_vec();
    encode_channels(space, &obs.channels, &mut out)?;
    Ok(out)
}

pub fn decode_obs(space: &SpaceDescriptor, payload: &[u8]) -> Result<Observation, RpcError> {
    let mut r = Reader::new(payload);
    let step = r.u64("step")?;
    let channels = decode_channels(space, &mut r)?;
    r.finish()?;
    Ok(Observation::new(step, channels))
}

pub fn encode_act(space: &SpaceDescriptor, chunk: &[Action]) -> Result<Vec<u8>, RpcError> {
    let mut out = (chunk.len() as u32).to_le_bytes().to_vec();
    for a in chunk {
        encode_channels(space, &a.channels, &mut out)?;
    }
    Ok(out)
}

pub fn decode_act(space: &SpaceDescriptor, payload: &[u8]) -> Result<Vec<Action>, RpcError> {
    let mut r = Reader::new(payload);
    let n = r.u32("count")? as usize;
    let chunk = (0..n).map(|_| decode_channels(space, &mut r).map(Action::new)).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(chunk)
}

/// Builds one policy per accepted connection.
pub type PolicyFactory = Arc<dyn Fn() -> Box<dyn Policy> + Send + Sync>;

pub struct ServerHandle {
    endpoint: Endpoint,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Stops accepting, sends CLOSE to connected clients and joins.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Serves policies on `endpoint`; each connection gets its own session and
/// policy instance.
pub fn serve_policy(factory: PolicyFactory, endpoint: &str) -> Result<ServerHandle, RpcError> {
    let listener = Listener::bind(endpoint)?;
    let bound = listener.endpoint()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = std::thread::Builder::new().name(format!("serve {bound}")).spawn(move || {
        let mut sessions: Vec<JoinHandle<()>> = Vec::new();
        while !flag.load(Ordering::SeqCst) {
            match listener.accept(POLL) {
                Ok(Some(transport)) => {
                    let policy = factory();
                    let flag = flag.clone();
                    sessions.push(std::thread::spawn(move || {
                        if let Err(e) = run_session(transport, policy, &flag) {
                            log::debug!("policy session ended: {e}");
                        }
                    }));
                }
                Ok(None) => {}
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    break;
                }
            }
            sessions.retain(|s| !s.is_finished());
        }
        for s in sessions {
            let _ = s.join();
        }
    })?;
    Ok(ServerHandle { endpoint: bound, stop, thread: Some(thread) })
}

fn run_session(mut t: Box<dyn Transport>, mut policy: Box<dyn Policy>, stop: &AtomicBool) -> Result<(), RpcError> {
    let hello = recv_unless_stopped(&mut t, stop)?;
    let Some(hello) = hello else { return Ok(()) };
    if hello.kind != MsgType::Hello {
        t.send(&Frame::error(hello.seq, "expected HELLO"))?;
        return Err(RpcError::Protocol("expected HELLO".into()));
    }
    let h = decode_hello(&hello.payload)?;
    if let Err(msg) = check_hello(&h, policy.as_ref()) {
        t.send(&Frame::error(hello.seq, &msg))?;
        t.send(&Frame::close(hello.seq))?;
        return Err(RpcError::SchemaMismatch(msg));
    }
    let mut ack = Vec::new();
    ack.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    ack.extend_from_slice(&(h.session.horizon as u32).to_le_bytes());
    ack.extend_from_slice(&h.session.observation_digest);
    ack.extend_from_slice(&h.session.action_digest);
    t.send(&Frame::new(MsgType::HelloAck, hello.seq, ack))?;
    let mut last_seq = hello.seq;
    loop {
        let Some(frame) = recv_unless_stopped(&mut t, stop)? else {
            let _ = t.send(&Frame::close(last_seq));
            return Ok(());
        };
        if frame.seq <= last_seq {
            t.send(&Frame::error(frame.seq, "sequence number did not increase"))?;
            return Err(RpcError::Protocol("non-increasing sequence".into()));
        }
        last_seq = frame.seq;
        match frame.kind {
            MsgType::Obs => {
                let reply = decode_obs(&h.observation_space, &frame.payload)
                    .map_err(|e| e.to_string())
                    .and_then(|obs| policy.act_chunk(&obs, h.session.horizon).map_err(|e| e.to_string()))
                    .and_then(|chunk| check_chunk(&h, chunk))
                    .and_then(|chunk| encode_act(&h.action_space, &chunk).map_err(|e| e.to_string()));
                match reply {
                    Ok(payload) => t.send(&Frame::new(MsgType::Act, frame.seq, payload))?,
                    Err(msg) => t.send(&Frame::error(frame.seq, &msg))?,
                }
            }
            MsgType::Reset => {
                let seed = Reader::new(&frame.payload).u64("seed")?;
                if let Err(e) = policy.reset(seed) {
                    t.send(&Frame::error(frame.seq, &e.to_string()))?;
                }
            }
            MsgType::Close => return Ok(()),
            other => {
                t.send(&Frame::error(frame.seq, &format!("unexpected {other:?}")))?;
                return Err(RpcError::Protocol(format!("unexpected {other:?}")));
            }
        }
    }
}

fn recv_unless_stopped(t: &mut Box<dyn Transport>, stop: &AtomicBool) -> Result<Option<Frame>, RpcError> {
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(None);
        }
        match t.recv(POLL) {
            Ok(f) => return Ok(Some(f)),
            Err(RpcError::Timeout(_)) => continue,
            Err(e) => return Err(e),
        }
    }
}

fn check_hello(h: &Hello, policy: &dyn Policy) -> Result<(), String> {
    if h.session.protocol_version != PROTOCOL_VERSION {
        return Err(format!("protocol version {} unsupported", h.session.protocol_version));
    }
    if h.observation_space.digest() != h.session.observation_digest || h.action_space.digest() != h.session.action_digest {
        return Err("digest does not match the transmitted schema".into());
    }
    if h.session.horizon == 0 || h.session.replan_every == 0 || h.session.replan_every > h.session.horizon {
        return Err("horizon and replan interval must satisfy 1 ≤ replan ≤ horizon".into());
    }
    if let Some(space) = policy.action_space() {
        if space.digest() != h.session.action_digest {
            let at = space.first_difference(&h.action_space).unwrap_or_default();
            return Err(format!("action schema digest differs from the policy's (first difference at {at:?})"));
        }
    }
    if let Some(space) = policy.observation_space() {
        if let Some(name) = space.names().find(|n| !h.observation_space.contains(n)) {
            return Err(format!("observation lacks channel {name:?} required by the policy"));
        }
    }
    Ok(())
}

fn check_chunk(h: &Hello, chunk: Vec<Action>) -> Result<Vec<Action>, String> {
    if chunk.is_empty() || chunk.len() > h.session.horizon {
        return Err(format!("policy returned {} actions for horizon {}", chunk.len(), h.session.horizon));
    }
    Ok(chunk)
}

/// Env-side session. As a [`Policy`] every `act_chunk` is one OBS/ACT round
/// trip; wrap it in [`crate::policy::ChunkedAgent`] to consume chunks.
pub struct RemoteClient {
    transport: Box<dyn Transport>,
    session: SessionConfig,
    observation_space: SpaceDescriptor,
    action_space: SpaceDescriptor,
    seq: u32,
    timeout: Duration,
    requests: u64,
}

impl RemoteClient {
    pub fn connect(
        endpoint: &str,
        observation_space: &SpaceDescriptor,
        action_space: &SpaceDescriptor,
        horizon: usize,
        replan_every: usize,
        timeout: Duration,
    ) -> Result<Self, RpcError> {
        Self::handshake(connect(endpoint)?, observation_space, action_space, horizon, replan_every, timeout)
    }

    pub fn handshake(
        mut transport: Box<dyn Transport>,
        observation_space: &SpaceDescriptor,
        action_space: &SpaceDescriptor,
        horizon: usize,
        replan_every: usize,
        timeout: Duration,
    ) -> Result<Self, RpcError> {
        let session = SessionConfig::new(observation_space, action_space, horizon, replan_every);
        let hello = Hello {
            session: session.clone(),
            observation_space: observation_space.clone(),
            action_space: action_space.clone(),
        };
        transport.send(&Frame::new(MsgType::Hello, 0, encode_hello(&hello)))?;
        let reply = transport.recv(timeout)?;
        match reply.kind {
            MsgType::HelloAck if reply.seq == 0 => {
                let mut r = Reader::new(&reply.payload);
                let version = r.u16("version")?;
                let h = r.u32("horizon")? as usize;
                if version != PROTOCOL_VERSION || h != session.horizon {
                    return Err(RpcError::SchemaMismatch("server acknowledged different session parameters".into()));
                }
            }
            MsgType::Err => return Err(RpcError::SchemaMismatch(String::from_utf8_lossy(&reply.payload).into_owned())),
            other => return Err(RpcError::Protocol(format!("expected HELLO_ACK, got {other:?}"))),
        }
        Ok(Self {
            transport,
            session,
            observation_space: observation_space.clone(),
            action_space: action_space.clone(),
            seq: 0,
            timeout,
            requests: 0,
        })
    }

    pub fn session(&self) -> &SessionConfig {
        &self.session
    }

    /// OBS frames sent so far.
    pub fn requests(&self) -> u64 {
        self.requests
    }

    fn next_seq(&mut self) -> u32 {
        self.seq += 1;
        self.seq
    }

    pub fn request(&mut self, obs: &Observation) -> Result<Vec<Action>, RpcError> {
        let seq = self.next_seq();
        let payload = encode_obs(&self.observation_space, obs)?;
        self.transport.send(&Frame::new(MsgType::Obs, seq, payload))?;
        self.requests += 1;
        let reply = self.transport.recv(self.timeout)?;
        match reply.kind {
            MsgType::Act if reply.seq == seq => {
                let chunk = decode_act(&self.action_space, &reply.payload)?;
                if chunk.is_empty() || chunk.len() > self.session.horizon {
                    return Err(RpcError::Protocol(format!("chunk of {} actions", chunk.len())));
                }
                Ok(chunk)
            }
            MsgType::Act => Err(RpcError::Protocol(format!("ACT seq {} answers OBS seq {seq}", reply.seq))),
            MsgType::Err => Err(RpcError::Remote(String::from_utf8_lossy(&reply.payload).into_owned())),
            MsgType::Close => Err(RpcError::TransportClosed),
            other => Err(RpcError::Protocol(format!("unexpected {other:?}"))),
        }
    }

    pub fn send_reset(&mut self, seed: u64) -> Result<(), RpcError> {
        let seq = self.next_seq();
        self.transport.send(&Frame::new(MsgType::Reset, seq, seed.to_le_bytes().to_vec()))
    }
}

impl Drop for RemoteClient {
    fn drop(&mut self) {
        let seq = self.next_seq();
        let _ = self.transport.send(&Frame::close(seq));
    }
}

impl Policy for RemoteClient {
    fn name(&self) -> &str {
        "remote"
    }

    fn reset(&mut self, seed: u64) -> Result<(), EnvError> {
        Ok(self.send_reset(seed)?)
    }

    fn act_chunk(&mut self, obs: &Observation, _horizon: usize) -> Result<Vec<Action>, EnvError> {
        Ok(self.request(obs)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Agent, ChunkedAgent, FnPolicy};
    use crate::space::{Channels, Leaf, Value};
    use proptest::prelude::*;

    #[test]
    fn close_frame_is_nine_bytes() {
        let bytes = encode_frame(&Frame::close(7)).unwrap();
        assert_eq!(bytes, [0, 0, 0, 0, 6, 7, 0, 0, 0]);
    }

    proptest! {
        #[test]
        fn frame_round_trip(kind in 1u8..=7, seq in any::<u32>(), payload in proptest::collection::vec(any::<u8>(), 0..512)) {
            let f = Frame::new(MsgType::try_from(kind).unwrap(), seq, payload);
            let bytes = encode_frame(&f).unwrap();
            prop_assert_eq!(decode_frame(&bytes).unwrap(), (f, bytes.len()));
        }

        #[test]
        fn short_buffers_are_truncated(payload in proptest::collection::vec(any::<u8>(), 1..64), cut in 1usize..64) {
            let bytes = encode_frame(&Frame::new(MsgType::Obs, 1, payload)).unwrap();
            let cut = cut.min(bytes.len());
            let is_truncated = matches!(decode_frame(&bytes[..bytes.len() - cut]), Err(RpcError::TruncatedFrame { .. }));
            prop_assert!(is_truncated);
        }
    }

    #[test]
    fn unknown_type_and_oversize() {
        let mut bytes = encode_frame(&Frame::close(0)).unwrap();
        bytes[4] = 42;
        assert!(matches!(decode_frame(&bytes), Err(RpcError::UnknownType(42))));
        let mut big = vec![0u8; 9];
        big[..4].copy_from_slice(&((MAX_PAYLOAD as u32) + 1).to_le_bytes());
        big[4] = 3;
        assert!(matches!(decode_frame(&big), Err(RpcError::Oversize(_))));
    }

    #[test]
    fn endpoints_parse() {
        assert_eq!(Endpoint::parse("tcp://127.0.0.1:0").unwrap(), Endpoint::Tcp("127.0.0.1:0".into()));
        assert_eq!(Endpoint::parse("inproc://x").unwrap(), Endpoint::Inproc("x".into()));
        for bad in ["tcp://nohost", "udp://a:1", "inproc://", "127.0.0.1:5"] {
            assert!(matches!(Endpoint::parse(bad), Err(RpcError::BadEndpoint(_))), "{bad}");
        }
    }

    #[test]
    fn inproc_preserves_order() {
        let (mut a, mut b) = InprocTransport::pair(8);
        let t = std::thread::spawn(move || {
            for i in 0..10_000u32 {
                a.send(&Frame::new(MsgType::Obs, i, i.to_le_bytes().to_vec())).unwrap();
            }
        });
        for i in 0..10_000u32 {
            let f = b.recv(DEFAULT_TIMEOUT).unwrap();
            assert_eq!((f.seq, f.payload), (i, i.to_le_bytes().to_vec()));
        }
        t.join().unwrap();
        assert!(matches!(b.recv(Duration::from_millis(10)), Err(RpcError::TransportClosed)));
    }

    fn spaces() -> (SpaceDescriptor, SpaceDescriptor) {
        (
            SpaceDescriptor::new().with("x", Leaf::scalar(-1e9, 1e9, "")),
            SpaceDescriptor::new().with("u", Leaf::scalar(-1e9, 1e9, "")),
        )
    }

    /// Action `i` of the chunk for step t is `t + i`.
    fn echo() -> PolicyFactory {
        Arc::new(|| {
            Box::new(FnPolicy::new("echo", |obs: &Observation, h: usize| {
                Ok((0..h).map(|i| Action::new(Channels::new().with("u", Value::Scalar((obs.step + i as u64) as f64)))).collect())
            }))
        })
    }

    #[test]
    fn chunked_session_over_both_transports() {
        let (obs_space, act_space) = spaces();
        for endpoint in ["inproc://rpc-unit", "tcp://127.0.0.1:0"] {
            let server = serve_policy(echo(), endpoint).unwrap();
            let client =
                RemoteClient::connect(&server.endpoint().to_string(), &obs_space, &act_space, 5, 5, DEFAULT_TIMEOUT).unwrap();
            let mut agent = ChunkedAgent::new(client, 5, 5);
            for t in 0..23u64 {
                let obs = Observation::new(t, Channels::new().with("x", Value::Scalar(t as f64)));
                let a = agent.act(&obs).unwrap();
                assert_eq!(a.channels.scalar("u"), Some(t as f64));
            }
            assert_eq!(agent.policy().requests(), 5);
            drop(agent);
            server.shutdown();
        }
    }

    #[test]
    fn mismatched_action_schema_is_refused() {
        let (obs_space, act_space) = spaces();
        let factory: PolicyFactory = Arc::new(move || {
            let space = SpaceDescriptor::new().with("other", Leaf::scalar(0.0, 1.0, ""));
            Box::new(FnPolicy::new("strict", |_: &Observation, _| Ok(vec![])).with_action_space(space))
        });
        let server = serve_policy(factory, "inproc://rpc-mismatch").unwrap();
        let err = RemoteClient::connect("inproc://rpc-mismatch", &obs_space, &act_space, 1, 1, DEFAULT_TIMEOUT).err().unwrap();
        assert!(matches!(err, RpcError::SchemaMismatch(_)), "{err}");
        server.shutdown();
    }

    #[test]
    fn connecting_nowhere_is_refused() {
        assert!(matches!(connect("inproc://nobody-home"), Err(RpcError::ConnectionRefused(_))));
    }
}
