//! Identity wrapper that forwards every observation and action over a
//! transport, using the policy protocol's framing.
//!
//! Frame sequence: HELLO (schemas, seq 0) at bind, then per episode RESET
//! (seed) and OBS (initial observation), then per step ACT (the action, a
//! one-element chunk) followed by OBS (the resulting observation). Sequence
//! numbers are contiguous. A slow consumer blocks the step.

use std::time::Duration;

use crate::env::{EnvError, EnvSpaces, Environment, StepResult, Wrapper};
use crate::rpc::{decode_act, decode_hello, decode_obs, encode_act, encode_hello, encode_obs, Frame, Hello, MsgType, RpcError, SessionConfig, Transport};
use crate::space::{Action, Observation, SpaceDescriptor};

pub struct StreamWrapper {
    transport: Box<dyn Transport>,
    spaces: Option<EnvSpaces>,
    seq: u32,
}

impl StreamWrapper {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        Self { transport, spaces: None, seq: 0 }
    }

    fn send(&mut self, kind: MsgType, payload: Vec<u8>) -> Result<(), EnvError> {
        let frame = Frame::new(kind, self.seq, payload);
        self.seq = self.seq.wrapping_add(1);
        self.transport.send(&frame).map_err(|e| match e {
            RpcError::TransportClosed => EnvError::TransportClosed,
            other => EnvError::Rpc(other),
        })
    }

    fn send_obs(&mut self, obs: &Observation) -> Result<(), EnvError> {
        let payload = encode_obs(&self.spaces.as_ref().unwrap().observation, obs)?;
        self.send(MsgType::Obs, payload)
    }
}

impl Wrapper for StreamWrapper {
    fn name(&self) -> &str {
        "stream"
    }

    fn bind(&mut self, inner: &dyn Environment) -> Result<EnvSpaces, EnvError> {
        let spaces = inner.spaces().clone();
        let hello = Hello {
            session: SessionConfig::new(&spaces.observation, &spaces.action, 1, 1),
            observation_space: spaces.observation.clone(),
            action_space: spaces.action.clone(),
        };
        self.spaces = Some(spaces.clone());
        self.send(MsgType::Hello, encode_hello(&hello))?;
        Ok(spaces)
    }

    fn on_reset(&mut self, seed: u64, obs: Observation, _inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        self.send(MsgType::Reset, seed.to_le_bytes().to_vec())?;
        self.send_obs(&obs)?;
        Ok(obs)
    }

    fn after_step(&mut self, action: &Action, result: &mut StepResult) -> Result<(), EnvError> {
        let payload = encode_act(&self.spaces.as_ref().unwrap().action, std::slice::from_ref(action))?;
        self.send(MsgType::Act, payload)?;
        self.send_obs(&result.observation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Reset { seq: u32, seed: u64 },
    Observation { seq: u32, observation: Observation },
    Action { seq: u32, action: Action },
}

impl StreamEvent {
    pub fn seq(&self) -> u32 {
        match self {
            StreamEvent::Reset { seq, .. } | StreamEvent::Observation { seq, .. } | StreamEvent::Action { seq, .. } => *seq,
        }
    }
}

/// Remote end of a [`StreamWrapper`].
pub struct StreamReceiver {
    transport: Box<dyn Transport>,
    observation_space: SpaceDescriptor,
    action_space: SpaceDescriptor,
    timeout: Duration,
}

impl StreamReceiver {
    /// Waits for the HELLO frame that carries the schemas.
    pub fn accept(mut transport: Box<dyn Transport>, timeout: Duration) -> Result<Self, RpcError> {
        let f = transport.recv(timeout)?;
        if f.kind != MsgType::Hello {
            return Err(RpcError::Protocol(format!("stream must open with HELLO, got {:?}", f.kind)));
        }
        let hello = decode_hello(&f.payload)?;
        Ok(Self { transport, observation_space: hello.observation_space, action_space: hello.action_space, timeout })
    }

    pub fn observation_space(&self) -> &SpaceDescriptor {
        &self.observation_space
    }

    pub fn recv(&mut self) -> Result<StreamEvent, RpcError> {
        let f = self.transport.recv(self.timeout)?;
        Ok(match f.kind {
            MsgType::Reset => {
                StreamEvent::Reset { seq: f.seq, seed: crate::codec::Reader::new(&f.payload).u64("seed")? }
            }
            MsgType::Obs => StreamEvent::Observation { seq: f.seq, observation: decode_obs(&self.observation_space, &f.payload)? },
            MsgType::Act => {
                let mut chunk = decode_act(&self.action_space, &f.payload)?;
                if chunk.len() != 1 {
                    return Err(RpcError::Protocol("stream ACT must carry exactly one action".into()));
                }
                StreamEvent::Action { seq: f.seq, action: chunk.remove(0) }
            }
            MsgType::Close => return Err(RpcError::TransportClosed),
            other => return Err(RpcError::Protocol(format!("unexpected {other:?} in stream"))),
        })
    }
}
