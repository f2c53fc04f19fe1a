//! Environment interface and the wrapper algebra.
//!
//! A wrapper is the tuple ⟨f, g, P′, R′⟩: `observation` maps inner
//! observations outward (f), `action` maps outer actions inward (g),
//! `transition` may intercept the inner step (P′) and `reward` may replace the
//! reward (R′). For a chain `W⁽ⁿ⁾ ▷ … ▷ W⁽¹⁾ ▷ M` an outer action traverses
//! g⁽ⁿ⁾ first and g⁽¹⁾ last; the base observation traverses f⁽¹⁾ first and
//! f⁽ⁿ⁾ last.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::rpc::RpcError;
use crate::sim::SimEnv;
use crate::space::{Action, Observation, SpaceDescriptor, SpaceError};
use crate::storage::StorageError;

#[derive(Debug, Clone, PartialEq)]
pub enum InfoValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl InfoValue {
    pub fn as_bool(&self) -> Option<bool> {
        match self {
            InfoValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            InfoValue::Float(x) => Some(*x),
            InfoValue::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            InfoValue::Int(i) => Some(*i),
            _ => None,
        }
    }
}

pub type Info = BTreeMap<String, InfoValue>;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: Info,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }

    pub fn flag(&self, key: &str) -> bool {
        self.info.get(key).and_then(InfoValue::as_bool).unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpaces {
    pub observation: SpaceDescriptor,
    pub action: SpaceDescriptor,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("space mismatch at channel {channel:?}: {reason}")]
    SpaceMismatch { channel: String, reason: String },
    #[error("environment stepped before reset")]
    NotReset,
    #[error("action out of bounds: {0}")]
    ActionOutOfBounds(SpaceError),
    #[error("camera unavailable: {0}")]
    CameraUnavailable(String),
    #[error("unknown object {0:?}")]
    UnknownObject(String),
    #[error("digital twin diverged from protected env by {divergence:.3e}")]
    TwinDesync { divergence: f64 },
    #[error("transport closed")]
    TransportClosed,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error(transparent)]
    Kin(#[from] crate::kin::KinError),
    #[error("policy failed: {0}")]
    Policy(String),
}

impl EnvError {
    pub fn mismatch(channel: impl Into<String>, reason: impl Into<String>) -> Self {
        EnvError::SpaceMismatch { channel: channel.into(), reason: reason.into() }
    }
}

impl From<crate::codec::CodecError> for EnvError {
    fn from(e: crate::codec::CodecError) -> Self {
        EnvError::Rpc(RpcError::Codec(e))
    }
}

impl From<SpaceError> for EnvError {
    fn from(e: SpaceError) -> Self {
        EnvError::SpaceMismatch { channel: e.path, reason: e.reason }
    }
}

/// An actuator that opens and closes, in meters of finger width.
pub trait Gripper {
    fn max_width(&self) -> f64;
    fn width(&self) -> f64;
    fn commanded_width(&self) -> f64;
    fn command_width(&mut self, width: f64);
}

pub trait Environment: Send {
    fn spaces(&self) -> &EnvSpaces;
    fn reset(&mut self, seed: u64) -> Result<Observation, EnvError>;
    fn step(&mut self, action: Action) -> Result<StepResult, EnvError>;

    fn gripper(&mut self) -> Option<&mut dyn Gripper> {
        None
    }

    /// Gripper opening range, checked while binding wrappers.
    fn gripper_max_width(&self) -> Option<f64> {
        None
    }

    /// The simulator at the bottom of the chain, when there is one.
    fn sim(&self) -> Option<&SimEnv> {
        None
    }

    fn sim_mut(&mut self) -> Option<&mut SimEnv> {
        None
    }
}

impl Environment for Box<dyn Environment> {
    fn spaces(&self) -> &EnvSpaces {
        (**self).spaces()
    }
    fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        (**self).reset(seed)
    }
    fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        (**self).step(action)
    }
    fn gripper(&mut self) -> Option<&mut dyn Gripper> {
        (**self).gripper()
    }
    fn gripper_max_width(&self) -> Option<f64> {
        (**self).gripper_max_width()
    }
    fn sim(&self) -> Option<&SimEnv> {
        (**self).sim()
    }
    fn sim_mut(&mut self) -> Option<&mut SimEnv> {
        (**self).sim_mut()
    }
}

/// One layer of the chain. Every hook defaults to the identity.
pub trait Wrapper: Send {
    fn name(&self) -> &str;

    /// Checks that the inner spaces satisfy this wrapper and returns the
    /// outer spaces it exposes.
    fn bind(&mut self, inner: &dyn Environment) -> Result<EnvSpaces, EnvError> {
        Ok(inner.spaces().clone())
    }

    /// Called after the inner env reset; wrapper state must be cleared here.
    fn on_reset(&mut self, _seed: u64, obs: Observation, _inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        Ok(obs)
    }

    /// g: outer action → inner action.
    fn action(&mut self, action: Action, _inner: &mut dyn Environment) -> Result<Action, EnvError> {
        Ok(action)
    }

    /// P′: by default the inner environment steps unchanged.
    fn transition(&mut self, action: Action, inner: &mut dyn Environment) -> Result<StepResult, EnvError> {
        inner.step(action)
    }

    /// f: inner observation → outer observation.
    fn observation(&mut self, obs: Observation, _inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        Ok(obs)
    }

    /// R′: `result` carries the outer observation; the base reward is in
    /// `info["raw_reward"]` once any inner wrapper has overridden it.
    fn reward(&mut self, _result: &StepResult) -> Option<f64> {
        None
    }

    /// Observer hook with the outer action and the final outer result.
    fn after_step(&mut self, _action: &Action, _result: &mut StepResult) -> Result<(), EnvError> {
        Ok(())
    }
}

pub struct IdentityWrapper;

impl Wrapper for IdentityWrapper {
    fn name(&self) -> &str {
        "identity"
    }
}

/// `W ▷ M`: an environment made of a wrapper around an inner environment.
pub struct Wrapped {
    wrapper: Box<dyn Wrapper>,
    inner: Box<dyn Environment>,
    spaces: EnvSpaces,
}

/// Applies `wrapper` to `env`. Fails with `SpaceMismatch` naming the first
/// incompatible channel when the wrapper's requirements are not met.
pub fn wrap(mut wrapper: Box<dyn Wrapper>, env: Box<dyn Environment>) -> Result<Box<dyn Environment>, EnvError> {
    let spaces = wrapper.bind(env.as_ref())?;
    spaces.observation.check()?;
    spaces.action.check()?;
    Ok(Box::new(Wrapped { wrapper, inner: env, spaces }))
}

impl Wrapped {
    pub fn wrapper_name(&self) -> &str {
        self.wrapper.name()
    }
}

impl Environment for Wrapped {
    fn spaces(&self) -> &EnvSpaces {
        &self.spaces
    }

    fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        let obs = self.inner.reset(seed)?;
        self.wrapper.on_reset(seed, obs, self.inner.as_mut())
    }

    fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        let inner_action = self.wrapper.action(action.clone(), self.inner.as_mut())?;
        let mut result = self.wrapper.transition(inner_action, self.inner.as_mut())?;
        result.observation = self.wrapper.observation(result.observation, self.inner.as_mut())?;
        if let Some(r) = self.wrapper.reward(&result) {
            result.info.entry("raw_reward".into()).or_insert(InfoValue::Float(result.reward));
            result.info.insert(format!("reward/{}", self.wrapper.name()), InfoValue::Float(r));
            result.reward = r;
        }
        self.wrapper.after_step(&action, &mut result)?;
        Ok(result)
    }

    fn gripper(&mut self) -> Option<&mut dyn Gripper> {
        self.inner.gripper()
    }

    fn gripper_max_width(&self) -> Option<f64> {
        self.inner.gripper_max_width()
    }

    fn sim(&self) -> Option<&SimEnv> {
        self.inner.sim()
    }

    fn sim_mut(&mut self) -> Option<&mut SimEnv> {
        self.inner.sim_mut()
    }
}

/// The outermost handle an agent talks to: a base environment plus ordered
/// wrappers (first = innermost). Adds reset tracking and the clamping policy.
pub struct WrapperChain {
    env: Box<dyn Environment>,
    names: Vec<String>,
    was_reset: bool,
}

impl WrapperChain {
    pub fn new(base: Box<dyn Environment>) -> Self {
        Self { env: base, names: Vec::new(), was_reset: false }
    }

    /// Builds `W⁽ⁿ⁾ ▷ … ▷ W⁽¹⁾ ▷ base` with `wrappers[0]` innermost.
    pub fn build(base: Box<dyn Environment>, wrappers: Vec<Box<dyn Wrapper>>) -> Result<Self, EnvError> {
        wrappers.into_iter().try_fold(Self::new(base), |chain, w| chain.with(w))
    }

    /// Adds one wrapper on the outside of the chain.
    pub fn with(self, wrapper: Box<dyn Wrapper>) -> Result<Self, EnvError> {
        let mut names = self.names;
        names.push(wrapper.name().to_string());
        let env = wrap(wrapper, self.env)?;
        Ok(Self { env, names, was_reset: false })
    }

    pub fn wrapper_names(&self) -> &[String] {
        &self.names
    }

    pub fn observation_space(&self) -> &SpaceDescriptor {
        &self.env.spaces().observation
    }

    pub fn action_space(&self) -> &SpaceDescriptor {
        &self.env.spaces().action
    }

    pub fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        let obs = self.env.reset(seed)?;
        self.was_reset = true;
        Ok(obs)
    }

    /// Out-of-range finite values are clamped and flagged with
    /// `info["clamped"] = true`; non-finite values are rejected.
    pub fn step(&mut self, mut action: Action) -> Result<StepResult, EnvError> {
        if !self.was_reset {
            return Err(EnvError::NotReset);
        }
        if let Some(bad) = first_non_finite(&action) {
            return Err(EnvError::ActionOutOfBounds(crate::space::SpaceError::new(bad, "non-finite value")));
        }
        let space = &self.env.spaces().action;
        let clamped = space.clamp(&mut action.channels);
        space.validate(&action.channels)?;
        let mut result = self.env.step(action)?;
        result.info.insert("clamped".into(), InfoValue::Bool(clamped));
        Ok(result)
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn env_mut(&mut self) -> &mut dyn Environment {
        self.env.as_mut()
    }

    pub fn sim(&self) -> Option<&SimEnv> {
        self.env.sim()
    }

    pub fn sim_mut(&mut self) -> Option<&mut SimEnv> {
        self.env.sim_mut()
    }

    pub fn into_env(self) -> Box<dyn Environment> {
        self.env
    }
}

fn first_non_finite(action: &Action) -> Option<String> {
    use crate::space::Value;
    fn walk(prefix: &str, ch: &crate::space::Channels) -> Option<String> {
        for (name, v) in ch.iter() {
            let path = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
            match v {
                Value::Scalar(x) if !x.is_finite() => return Some(path),
                Value::Vector(xs) if xs.iter().any(|x| !x.is_finite()) => return Some(path),
                Value::Dict(d) => {
                    if let Some(p) = walk(&path, d) {
                        return Some(p);
                    }
                }
                _ => {}
            }
        }
        None
    }
    walk("", &action.channels)
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    #[test]
    fn identity_wrap_keeps_spaces_and_steps() {
        let (base, _) = RecordingEnv::new();
        let (plain, _) = RecordingEnv::new();
        let spaces = base.spaces.clone();
        let mut wrapped = wrap(Box::new(IdentityWrapper), Box::new(base)).unwrap();
        let mut plain: Box<dyn Environment> = Box::new(plain);
        assert_eq!(wrapped.spaces(), &spaces);
        assert_eq!(wrapped.reset(3).unwrap(), plain.reset(3).unwrap());
        for u in [0.5, -2.0, 7.25] {
            assert_eq!(wrapped.step(act(u)).unwrap(), plain.step(act(u)).unwrap());
        }
    }

    #[test]
    fn action_chain_applies_outermost_first() {
        let (base, received) = RecordingEnv::new();
        // inner scale(x2), outer offset(+1): base receives 2 * (3 + 1).
        let mut chain =
            WrapperChain::build(Box::new(base), vec![Box::new(Scale(2.0)), Box::new(Offset(1.0))]).unwrap();
        chain.reset(0).unwrap();
        chain.step(act(3.0)).unwrap();
        assert_eq!(received.lock().unwrap().as_slice(), &[8.0]);
    }

    #[test]
    fn observation_chain_applies_innermost_first() {
        let (base, _) = RecordingEnv::new();
        let mut chain =
            WrapperChain::build(Box::new(base), vec![Box::new(AddConstant(4.0)), Box::new(Rename("c", "renamed"))])
                .unwrap();
        assert!(chain.observation_space().contains("renamed"));
        chain.reset(0).unwrap();
        let r = chain.step(act(1.0)).unwrap();
        assert_eq!(r.observation.channels.scalar("renamed"), Some(4.0));
        assert!(!r.observation.channels.contains("c"));
    }

    #[test]
    fn reversed_observation_order_is_a_mismatch() {
        let (base, _) = RecordingEnv::new();
        let err = WrapperChain::build(Box::new(base), vec![Box::new(Rename("c", "renamed")), Box::new(AddConstant(4.0))])
            .err()
            .unwrap();
        assert!(matches!(err, EnvError::SpaceMismatch { ref channel, .. } if channel == "c"));
    }

    #[test]
    fn step_before_reset_fails() {
        let (base, _) = RecordingEnv::new();
        let mut chain = WrapperChain::new(Box::new(base));
        assert!(matches!(chain.step(act(1.0)), Err(EnvError::NotReset)));
    }

    #[test]
    fn out_of_bounds_is_clamped_and_flagged() {
        let (base, received) = RecordingEnv::new();
        let mut chain = WrapperChain::new(Box::new(base));
        chain.reset(0).unwrap();
        let r = chain.step(act(5e6)).unwrap();
        assert!(r.flag("clamped"));
        assert_eq!(received.lock().unwrap()[0], 1e6);
        let r = chain.step(act(1.0)).unwrap();
        assert!(!r.flag("clamped"));
        assert!(matches!(chain.step(act(f64::NAN)), Err(EnvError::ActionOutOfBounds(_))));
    }

    #[test]
    fn outermost_reward_override_wins() {
        let (base, _) = RecordingEnv::new();
        let mut chain = WrapperChain::build(
            Box::new(base),
            vec![Box::new(ConstReward("inner", 1.0)), Box::new(IdentityWrapper), Box::new(ConstReward("outer", 2.0))],
        )
        .unwrap();
        chain.reset(0).unwrap();
        let r = chain.step(act(9.0)).unwrap();
        assert_eq!(r.reward, 2.0);
        assert_eq!(r.info["raw_reward"], InfoValue::Float(9.0));
        assert_eq!(r.info["reward/inner"], InfoValue::Float(1.0));
    }
}
