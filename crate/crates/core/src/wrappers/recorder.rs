//! Identity wrapper that records aligned episodes.
//!
//! Each step stores the observation the action was chosen from, the action
//! as received by this wrapper, and the resulting reward and flags. Records
//! go through a bounded queue to one writer thread; a full queue blocks the
//! step. Episodes close on termination or truncation, on reset (the last
//! step is then marked truncated), or when recording is stopped. Dropping the
//! wrapper mid-episode writes what exists with `partial = true`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc::{self, SyncSender};
use std::sync::{Arc, Mutex};

use serde_json::Value as Json;

use crate::env::{EnvError, EnvSpaces, Environment, StepResult, Wrapper};
use crate::space::{Action, Observation};
use crate::storage::{period_ns, Compression, EpisodeHeader, EpisodeRecord, EpisodeSink, StepRecord, StorageError};

#[derive(Debug, Clone)]
pub struct RecorderConfig {
    pub task: String,
    /// Defaults to the scene's control rate, or 30 Hz without a simulator.
    pub control_rate_hz: Option<f64>,
    pub config_digest: String,
    /// Defaults to every action channel named `cartesian_delta`.
    pub delta_channels: Option<Vec<String>>,
    pub compression: Compression,
    /// Discard episodes that did not succeed instead of writing them.
    pub success_only: bool,
    pub queue_capacity: usize,
    /// Start recording at reset; otherwise wait for [`RecorderHandle::start`].
    pub auto_start: bool,
    pub extra: BTreeMap<String, Json>,
}

impl Default for RecorderConfig {
    fn default() -> Self {
        Self {
            task: "pick-cuboid".into(),
            control_rate_hz: None,
            config_digest: String::new(),
            delta_channels: None,
            compression: Compression::None,
            success_only: false,
            queue_capacity: 256,
            auto_start: true,
            extra: BTreeMap::new(),
        }
    }
}

enum Msg {
    Begin(Box<EpisodeHeader>),
    Step(Box<StepRecord>),
    End { success: bool, partial: bool, truncate_last: bool },
    Flush(SyncSender<()>),
}

#[derive(Debug, Default)]
pub struct RecorderStats {
    pub written: Vec<Option<PathBuf>>,
    pub discarded: usize,
    pub errors: Vec<String>,
}

#[derive(Default)]
struct Shared {
    stats: RecorderStats,
    pending_error: Option<StorageError>,
}

#[derive(Default)]
struct Control {
    armed: bool,
    start_requested: bool,
    success_marked: bool,
}

/// Outside view of a recorder: statistics, flushing and record control.
#[derive(Clone)]
pub struct RecorderHandle {
    tx: SyncSender<Msg>,
    shared: Arc<Mutex<Shared>>,
    control: Arc<Mutex<Control>>,
}

impl RecorderHandle {
    /// Blocks until every record sent so far has been handled.
    pub fn flush(&self) {
        let (ack_tx, ack_rx) = mpsc::sync_channel(1);
        if self.tx.send(Msg::Flush(ack_tx)).is_ok() {
            let _ = ack_rx.recv();
        }
    }

    pub fn written(&self) -> Vec<Option<PathBuf>> {
        self.shared.lock().unwrap().stats.written.clone()
    }

    pub fn discarded(&self) -> usize {
        self.shared.lock().unwrap().stats.discarded
    }

    pub fn errors(&self) -> Vec<String> {
        self.shared.lock().unwrap().stats.errors.clone()
    }

    /// Begins a new episode at the next step.
    pub fn start(&self) {
        let mut c = self.control.lock().unwrap();
        c.armed = true;
        c.start_requested = true;
    }

    /// Closes the current episode at the next step.
    pub fn stop(&self) {
        self.control.lock().unwrap().armed = false;
    }

    /// Labels the current episode successful.
    pub fn mark_success(&self) {
        self.control.lock().unwrap().success_marked = true;
    }

    pub fn is_armed(&self) -> bool {
        self.control.lock().unwrap().armed
    }
}

pub struct RecorderWrapper {
    config: RecorderConfig,
    handle: RecorderHandle,
    header: Option<EpisodeHeader>,
    seed: u64,
    last_obs: Option<Observation>,
    open: bool,
    step: u64,
    last_success: bool,
}

impl RecorderWrapper {
    pub fn new(config: RecorderConfig, mut sink: Box<dyn EpisodeSink>) -> (Self, RecorderHandle) {
        let (tx, rx) = mpsc::sync_channel::<Msg>(config.queue_capacity.max(1));
        let shared = Arc::new(Mutex::new(Shared::default()));
        let writer_shared = shared.clone();
        let success_only = config.success_only;
        std::thread::Builder::new()
            .name("episode writer".into())
            .spawn(move || {
                let mut current: Option<EpisodeRecord> = None;
                for msg in rx {
                    match msg {
                        Msg::Begin(header) => current = Some(EpisodeRecord::new(*header)),
                        Msg::Step(s) => {
                            if let Some(ep) = current.as_mut() {
                                ep.steps.push(*s);
                            }
                        }
                        Msg::End { success, partial, truncate_last } => {
                            let Some(mut ep) = current.take() else { continue };
                            if ep.steps.is_empty() {
                                continue;
                            }
                            if truncate_last {
                                if let Some(last) = ep.steps.last_mut() {
                                    last.truncated = true;
                                }
                            }
                            ep.header.success = success;
                            ep.header.partial = partial;
                            ep.header.step_count = ep.steps.len() as u64;
                            let mut shared = writer_shared.lock().unwrap();
                            if success_only && !success && !partial {
                                shared.stats.discarded += 1;
                                continue;
                            }
                            match sink.write(&ep) {
                                Ok(path) => shared.stats.written.push(path),
                                Err(e) => {
                                    shared.stats.errors.push(e.to_string());
                                    ep.header.partial = true;
                                    if let Ok(path) = sink.write(&ep) {
                                        shared.stats.written.push(path);
                                    }
                                    shared.pending_error = Some(e);
                                }
                            }
                        }
                        Msg::Flush(ack) => {
                            let _ = ack.send(());
                        }
                    }
                }
            })
            .expect("spawn episode writer");
        let control = Arc::new(Mutex::new(Control { armed: config.auto_start, ..Default::default() }));
        let handle = RecorderHandle { tx, shared, control };
        let wrapper = Self {
            config,
            handle: handle.clone(),
            header: None,
            seed: 0,
            last_obs: None,
            open: false,
            step: 0,
            last_success: false,
        };
        (wrapper, handle)
    }

    fn send(&self, msg: Msg) -> Result<(), EnvError> {
        self.handle.tx.send(msg).map_err(|_| EnvError::Storage(StorageError::Io(std::io::Error::other("episode writer stopped"))))
    }

    fn begin(&mut self) -> Result<(), EnvError> {
        let mut header = self.header.clone().expect("bound before use");
        header.seed = self.seed;
        self.send(Msg::Begin(Box::new(header)))?;
        self.open = true;
        self.step = 0;
        self.last_success = false;
        self.handle.control.lock().unwrap().success_marked = false;
        Ok(())
    }

    fn end(&mut self, partial: bool, truncate_last: bool) -> Result<(), EnvError> {
        if !self.open {
            return Ok(());
        }
        self.open = false;
        let marked = std::mem::take(&mut self.handle.control.lock().unwrap().success_marked);
        self.send(Msg::End { success: self.last_success || marked, partial, truncate_last })
    }

    fn take_error(&self) -> Result<(), EnvError> {
        match self.handle.shared.lock().unwrap().pending_error.take() {
            Some(e) => Err(EnvError::Storage(e)),
            None => Ok(()),
        }
    }
}

fn succeeded(result: &StepResult) -> bool {
    result.flag("success") || result.observation.channels.discrete("success") == Some(1)
}

impl Wrapper for RecorderWrapper {
    fn name(&self) -> &str {
        "recorder"
    }

    fn bind(&mut self, inner: &dyn Environment) -> Result<EnvSpaces, EnvError> {
        let spaces = inner.spaces().clone();
        let rate = self.config.control_rate_hz.or_else(|| inner.sim().map(|s| s.model().scene.control_rate_hz)).unwrap_or(30.0);
        let mut header = EpisodeHeader::new(&self.config.task, 0, rate, spaces.observation.clone(), spaces.action.clone());
        header.config_digest = self.config.config_digest.clone();
        header.compression = self.config.compression;
        header.delta_channels = self
            .config
            .delta_channels
            .clone()
            .unwrap_or_else(|| spaces.action.names().filter(|n| *n == "cartesian_delta").map(String::from).collect());
        header.extra = self.config.extra.clone();
        self.header = Some(header);
        Ok(spaces)
    }

    fn on_reset(&mut self, seed: u64, obs: Observation, _inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        if self.open {
            self.end(false, true)?;
            self.handle.flush();
            self.take_error()?;
        }
        self.seed = seed;
        self.last_obs = Some(obs.clone());
        if self.handle.control.lock().unwrap().armed {
            self.begin()?;
        }
        Ok(obs)
    }

    fn after_step(&mut self, action: &Action, result: &mut StepResult) -> Result<(), EnvError> {
        let (armed, start) = {
            let mut c = self.handle.control.lock().unwrap();
            (c.armed, std::mem::take(&mut c.start_requested))
        };
        if self.open && !armed {
            self.end(false, false)?;
        } else if armed && start && !self.open && self.last_obs.is_some() {
            self.begin()?;
        }
        if self.open {
            let obs = self.last_obs.take().expect("observation precedes every step");
            let period = period_ns(self.header.as_ref().unwrap().control_rate_hz);
            self.send(Msg::Step(Box::new(StepRecord {
                step: self.step,
                timestamp_ns: self.step * period,
                observation: obs.channels,
                action: action.channels.clone(),
                reward: result.reward,
                terminated: result.terminated,
                truncated: result.truncated,
            })))?;
            self.step += 1;
            self.last_success |= succeeded(result);
            if result.done() {
                self.end(false, false)?;
            }
        }
        self.last_obs = Some(result.observation.clone());
        self.take_error()
    }
}

impl Drop for RecorderWrapper {
    fn drop(&mut self) {
        if self.open {
            let _ = self.end(true, false);
        }
        self.handle.flush();
    }
}
