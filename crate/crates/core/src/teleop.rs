//! WebSocket teleoperation bridge.
//!
//! The bridge runs a Cartesian chain in asynchronous mode and talks JSON
//! text frames over one WebSocket connection. Clients send `input` frames
//! (end-effector delta and gripper command) and `record` frames (start,
//! stop, mark_success); the bridge answers with a `hello` frame on connect
//! and `state` frames after steps.
//!
//! In real-time mode the env loop runs at the control rate on its own
//! thread and exchanges the newest input and the newest state with the
//! socket thread through single-slot mailboxes. Without a client, or with
//! no new input since the last step, the arm holds. In lockstep mode each
//! input frame produces exactly one step and one state frame, which makes
//! sessions reproducible.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::config::{ChainConfig, WrapperConfig};
use crate::env::{EnvError, WrapperChain};
use crate::sim::{encode_png, CameraModel, ControlMode, StepMode};
use crate::space::{Action, Channels, Observation, Value};
use crate::storage::Compression;
use crate::wrappers::RecorderHandle;

pub const TELEOP_PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordCommand {
    Start,
    Stop,
    MarkSuccess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFrame {
    pub seq: u64,
    /// `[dx, dy, dz, rx, ry, rz]`: translation in meters, rotation as a
    /// scaled axis in radians, both in the base frame.
    pub delta: [f64; 6],
    /// 0 open, 1 closed.
    pub gripper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientFrame {
    Input(InputFrame),
    Record { command: RecordCommand },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub id: String,
    pub shape: crate::sim::Shape,
    pub graspable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloFrame {
    pub version: u32,
    pub scene: String,
    pub control_rate_hz: f64,
    pub lockstep: bool,
    pub dof: usize,
    pub workspace: Option<crate::sim::scene::Workspace>,
    pub safety_zone: Option<crate::sim::Aabb>,
    pub objects: Vec<ObjectInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingStatus {
    pub active: bool,
    /// Episodes written so far.
    pub episodes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub name: String,
    pub format: String,
    pub height: usize,
    pub width: usize,
    /// Base64 PNG.
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    /// Bridge-wide step counter, strictly increasing.
    pub step: u64,
    pub episode: u64,
    pub episode_step: u64,
    pub seed: u64,
    pub joint_positions: Vec<f64>,
    pub ee_pose: Vec<f64>,
    pub gripper_width: f64,
    pub grasped: bool,
    pub objects: BTreeMap<String, Vec<f64>>,
    pub success: bool,
    /// Sequence number of the input applied in this step.
    pub input_seq: Option<u64>,
    pub recording: RecordingStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Hello(HelloFrame),
    State(StateFrame),
    Error { message: String },
}

#[derive(Debug, Clone)]
pub struct BridgeConfig {
    /// Control and step mode are forced to Cartesian and asynchronous.
    pub chain: ChainConfig,
    pub bind: String,
    pub record_dir: Option<PathBuf>,
    pub seed: u64,
    pub lockstep: bool,
    pub camera: Option<String>,
    pub camera_max_hz: f64,
    pub camera_resolution: [usize; 2],
    /// Real-time mode stops after this many steps.
    pub max_steps: Option<u64>,
}

impl BridgeConfig {
    pub fn new(chain: ChainConfig) -> Self {
        Self {
            chain,
            bind: "127.0.0.1:0".into(),
            record_dir: None,
            seed: 0,
            lockstep: false,
            camera: None,
            camera_max_hz: 10.0,
            camera_resolution: [48, 64],
            max_steps: None,
        }
    }

    pub fn pick_cuboid() -> Self {
        Self::new(ChainConfig::pick_cuboid())
    }
}

/// The env side of the bridge.
pub struct TeleopSession {
    chain: WrapperChain,
    recorder: Option<RecorderHandle>,
    hello: HelloFrame,
    camera: Option<CameraModel>,
    camera_every: u64,
    seed0: u64,
    episode: u64,
    episode_step: u64,
    step: u64,
    gripper: f64,
    obs: Observation,
    input_seq: Option<u64>,
    success: bool,
    done: bool,
}

impl TeleopSession {
    pub fn new(cfg: &BridgeConfig) -> Result<Self, EnvError> {
        let mut chain_cfg = cfg.chain.clone();
        chain_cfg.control(ControlMode::Cartesian).mode(StepMode::Async);
        let model = chain_cfg.model()?;
        if let Some(dir) = &cfg.record_dir {
            chain_cfg = chain_cfg.with(WrapperConfig::Recorder {
                sink: format!("file://{}", dir.display()),
                task: model.scene.name.clone(),
                success_only: false,
                compression: Compression::None,
                auto_start: false,
            });
        }
        let built = chain_cfg.build_on(model.clone())?;
        if !built.chain.action_space().contains("gripper") {
            return Err(EnvError::Config("teleop chain needs a gripper wrapper".into()));
        }
        let camera = match &cfg.camera {
            Some(name) => {
                let cam = model
                    .cameras
                    .iter()
                    .find(|c| &c.name == name)
                    .ok_or_else(|| EnvError::CameraUnavailable(name.clone()))?;
                Some(cam.with_resolution(cfg.camera_resolution[0], cfg.camera_resolution[1]))
            }
            None => None,
        };
        let rate = model.scene.control_rate_hz;
        let hello = HelloFrame {
            version: TELEOP_PROTOCOL_VERSION,
            scene: model.scene.name.clone(),
            control_rate_hz: rate,
            lockstep: cfg.lockstep,
            dof: model.chain.dof(),
            workspace: model.scene.workspace.clone(),
            safety_zone: model.scene.safety_zone,
            objects: model
                .scene
                .objects
                .iter()
                .map(|o| ObjectInfo { id: o.id.clone(), shape: o.shape, graspable: o.graspable })
                .collect(),
        };
        let mut chain = built.chain;
        let obs = chain.reset(cfg.seed)?;
        Ok(Self {
            chain,
            recorder: built.recorders.into_iter().next(),
            hello,
            camera,
            camera_every: (rate / cfg.camera_max_hz.max(1e-9)).ceil().max(1.0) as u64,
            seed0: cfg.seed,
            episode: 0,
            episode_step: 0,
            step: 0,
            gripper: 0.0,
            obs,
            input_seq: None,
            success: false,
            done: false,
        })
    }

    pub fn hello(&self) -> &HelloFrame {
        &self.hello
    }

    pub fn recorder(&self) -> Option<&RecorderHandle> {
        self.recorder.as_ref()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn command(&mut self, command: RecordCommand) {
        if let Some(r) = &self.recorder {
            match command {
                RecordCommand::Start => r.start(),
                RecordCommand::Stop => r.stop(),
                RecordCommand::MarkSuccess => r.mark_success(),
            }
        }
    }

    /// One control step; `None` holds the arm and the gripper command.
    /// A finished episode resets to the next seed first.
    pub fn step(&mut self, input: Option<&InputFrame>) -> Result<StateFrame, EnvError> {
        if self.done {
            self.episode += 1;
            self.episode_step = 0;
            self.success = false;
            self.done = false;
            self.obs = self.chain.reset(self.seed())?;
        }
        let delta = input.map_or([0.0; 6], |i| i.delta);
        if let Some(i) = input {
            self.gripper = i.gripper;
        }
        self.input_seq = input.map(|i| i.seq);
        let ch = Channels::new()
            .with("cartesian_delta", Value::Vector(delta.to_vec()))
            .with("gripper", Value::Scalar(self.gripper));
        let r = self.chain.step(Action::new(ch))?;
        self.step += 1;
        self.episode_step += 1;
        self.success |= r.flag("success");
        self.done = r.done();
        self.obs = r.observation;
        Ok(self.state())
    }

    fn seed(&self) -> u64 {
        self.seed0.wrapping_add(self.episode)
    }

    pub fn state(&self) -> StateFrame {
        let ch = &self.obs.channels;
        let vec = |k: &str| ch.vector(k).map(<[f64]>::to_vec).unwrap_or_default();
        let objects = ch
            .dict("object_poses")
            .map(|d| d.iter().filter_map(|(k, v)| v.as_vector().map(|x| (k.clone(), x.to_vec()))).collect())
            .unwrap_or_default();
        let camera = self.camera.as_ref().filter(|_| self.step % self.camera_every == 0).and_then(|cam| {
            let sim = self.chain.sim()?;
            let png = encode_png(&sim.render(cam).rgb).ok()?;
            Some(CameraFrame {
                name: cam.name.clone(),
                format: "png".into(),
                height: cam.height,
                width: cam.width,
                data: base64::engine::general_purpose::STANDARD.encode(png),
            })
        });
        StateFrame {
            step: self.step,
            episode: self.episode,
            episode_step: self.episode_step,
            seed: self.seed(),
            joint_positions: vec("joint_positions"),
            ee_pose: vec("ee_pose"),
            gripper_width: ch.scalar("gripper_width").unwrap_or(0.0),
            grasped: ch.discrete("grasped") == Some(1),
            objects,
            success: self.success,
            input_seq: self.input_seq,
            recording: RecordingStatus {
                active: self.recorder.as_ref().is_some_and(|r| r.is_armed()),
                episodes: self.recorder.as_ref().map_or(0, |r| r.written().len() as u64),
            },
            camera,
        }
    }
}

pub struct BridgeSummary {
    pub steps: u64,
    pub episodes: Vec<PathBuf>,
}

pub struct TeleopBridge {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    session: Arc<Mutex<TeleopSession>>,
    env_done: Arc<AtomicBool>,
}

#[derive(Default)]
struct Mailboxes {
    input: Mutex<Option<InputFrame>>,
    state: Mutex<Option<(u64, String)>>,
    connected: AtomicBool,
    published: AtomicU64,
}

fn encode(frame: &ServerFrame) -> String {
    serde_json::to_string(frame).expect("server frames serialize")
}

impl TeleopBridge {
    pub fn start(cfg: BridgeConfig) -> Result<Self, EnvError> {
        let session = Arc::new(Mutex::new(TeleopSession::new(&cfg)?));
        let listener = TcpListener::bind(&cfg.bind).map_err(|e| EnvError::Config(format!("bind {}: {e}", cfg.bind)))?;
        listener.set_nonblocking(true).map_err(|e| EnvError::Config(e.to_string()))?;
        let addr = listener.local_addr().map_err(|e| EnvError::Config(e.to_string()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let env_done = Arc::new(AtomicBool::new(false));
        let boxes = Arc::new(Mailboxes::default());
        let (cmd_tx, cmd_rx) = mpsc::channel();
        let mut threads = Vec::new();

        if !cfg.lockstep {
            let (session, stop, boxes, env_done) = (session.clone(), stop.clone(), boxes.clone(), env_done.clone());
            let period = Duration::from_secs_f64(1.0 / session.lock().unwrap().hello.control_rate_hz);
            let max_steps = cfg.max_steps;
            threads.push(std::thread::spawn(move || {
                let mut next = Instant::now();
                while !stop.load(Ordering::SeqCst) {
                    if max_steps.is_some_and(|m| session.lock().unwrap().steps() >= m) {
                        break;
                    }
                    let input =
                        if boxes.connected.load(Ordering::SeqCst) { boxes.input.lock().unwrap().take() } else { None };
                    let frame = {
                        let mut s = session.lock().unwrap();
                        while let Ok(c) = cmd_rx.try_recv() {
                            s.command(c);
                        }
                        s.step(input.as_ref())
                    };
                    match frame {
                        Ok(f) => {
                            let step = f.step;
                            *boxes.state.lock().unwrap() = Some((step, encode(&ServerFrame::State(f))));
                            boxes.published.store(step, Ordering::SeqCst);
                        }
                        Err(e) => {
                            log::error!("teleop env loop stopped: {e}");
                            break;
                        }
                    }
                    next += period;
                    let now = Instant::now();
                    if next > now {
                        std::thread::sleep(next - now);
                    } else {
                        next = now;
                    }
                }
                env_done.store(true, Ordering::SeqCst);
            }));
        }

        {
            let (session, stop, boxes) = (session.clone(), stop.clone(), boxes.clone());
            let lockstep = cfg.lockstep;
            threads.push(std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, peer)) => {
                            log::info!("teleop client {peer} connected");
                            if let Err(e) = serve_client(stream, &session, &boxes, &cmd_tx, &stop, lockstep) {
                                log::warn!("teleop client {peer}: {e}");
                            }
                            boxes.connected.store(false, Ordering::SeqCst);
                            boxes.input.lock().unwrap().take();
                            log::info!("teleop client {peer} disconnected");
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(5));
                        }
                        Err(e) => {
                            log::error!("teleop accept: {e}");
                            break;
                        }
                    }
                }
            }));
        }
        Ok(Self { addr, stop, threads, session, env_done })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}", self.addr)
    }

    pub fn steps(&self) -> u64 {
        self.session.lock().unwrap().steps()
    }

    /// Real-time mode: whether the env loop has stopped.
    pub fn env_finished(&self) -> bool {
        self.env_done.load(Ordering::SeqCst)
    }

    pub fn state(&self) -> StateFrame {
        self.session.lock().unwrap().state()
    }

    /// Stops both threads; an episode still being recorded is written as
    /// partial.
    pub fn shutdown(mut self) -> BridgeSummary {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let session = Arc::try_unwrap(self.session).ok().expect("threads joined").into_inner().unwrap();
        let steps = session.steps();
        let recorder = session.recorder.clone();
        drop(session);
        let episodes = match recorder {
            Some(r) => {
                r.flush();
                r.written().into_iter().flatten().collect()
            }
            None => Vec::new(),
        };
        BridgeSummary { steps, episodes }
    }
}

type Socket = WebSocket<TcpStream>;

fn serve_client(
    stream: TcpStream,
    session: &Mutex<TeleopSession>,
    boxes: &Mailboxes,
    commands: &mpsc::Sender<RecordCommand>,
    stop: &AtomicBool,
    lockstep: bool,
) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws: Socket = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(5)))?;
    let (hello, state) = {
        let s = session.lock().unwrap();
        (s.hello().clone(), s.state())
    };
    let mut sent = state.step;
    ws.send(Message::text(encode(&ServerFrame::Hello(hello))))?;
    ws.send(Message::text(encode(&ServerFrame::State(state))))?;
    boxes.connected.store(true, Ordering::SeqCst);

    while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(text)) => match serde_json::from_str::<ClientFrame>(text.as_str()) {
                Ok(ClientFrame::Input(input)) if lockstep => {
                    let frame = session.lock().unwrap().step(Some(&input));
                    let reply = match frame {
                        Ok(f) => {
                            sent = f.step;
                            ServerFrame::State(f)
                        }
                        Err(e) => ServerFrame::Error { message: e.to_string() },
                    };
                    ws.send(Message::text(encode(&reply)))?;
                }
                Ok(ClientFrame::Input(input)) => *boxes.input.lock().unwrap() = Some(input),
                Ok(ClientFrame::Record { command }) if lockstep => session.lock().unwrap().command(command),
                Ok(ClientFrame::Record { command }) => {
                    let _ = commands.send(command);
                }
                Err(e) => ws.send(Message::text(encode(&ServerFrame::Error { message: e.to_string() })))?,
            },
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
        if !lockstep && boxes.published.load(Ordering::SeqCst) > sent {
            let latest = boxes.state.lock().unwrap().clone();
            if let Some((step, text)) = latest {
                if step > sent {
                    sent = step;
                    ws.send(Message::text(text))?;
                }
            }
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

/// Blocking WebSocket client speaking the bridge protocol.
pub struct TeleopClient {
    ws: WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>>,
    pub hello: HelloFrame,
    next_seq: u64,
}

impl TeleopClient {
    pub fn connect(url: &str) -> Result<Self, EnvError> {
        let err = |e: tungstenite::Error| EnvError::Config(format!("websocket: {e}"));
        let (mut ws, _) = tungstenite::connect(url).map_err(err)?;
        let hello = match read_frame(&mut ws)? {
            ServerFrame::Hello(h) => h,
            other => return Err(EnvError::Config(format!("expected hello, got {other:?}"))),
        };
        Ok(Self { ws, hello, next_seq: 0 })
    }

    pub fn send(&mut self, frame: &ClientFrame) -> Result<(), EnvError> {
        let text = serde_json::to_string(frame).expect("client frames serialize");
        self.ws.send(Message::text(text)).map_err(|e| EnvError::Config(format!("websocket: {e}")))
    }

    /// Sends an input frame with the next sequence number.
    pub fn input(&mut self, delta: [f64; 6], gripper: f64) -> Result<u64, EnvError> {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.send(&ClientFrame::Input(InputFrame { seq, delta, gripper }))?;
        Ok(seq)
    }

    pub fn record(&mut self, command: RecordCommand) -> Result<(), EnvError> {
        self.send(&ClientFrame::Record { command })
    }

    pub fn recv(&mut self) -> Result<ServerFrame, EnvError> {
        read_frame(&mut self.ws)
    }

    pub fn recv_state(&mut self) -> Result<StateFrame, EnvError> {
        loop {
            match self.recv()? {
                ServerFrame::State(s) => return Ok(s),
                ServerFrame::Error { message } => return Err(EnvError::Config(message)),
                ServerFrame::Hello(_) => {}
            }
        }
    }

    pub fn close(mut self) {
        let _ = self.ws.close(None);
        while self.ws.read().is_ok() {}
    }
}

fn read_frame<S: std::io::Read + std::io::Write>(ws: &mut WebSocket<S>) -> Result<ServerFrame, EnvError> {
    loop {
        match ws.read().map_err(|e| EnvError::Config(format!("websocket: {e}")))? {
            Message::Text(t) => {
                return serde_json::from_str(t.as_str()).map_err(|e| EnvError::Config(format!("bad frame: {e}")))
            }
            Message::Close(_) => return Err(EnvError::TransportClosed),
            _ => {}
        }
    }
}
