//! Adds a normalized gripper channel to the action and the measured finger
//! opening to the observation.

use crate::env::{EnvError, EnvSpaces, Environment, Wrapper};
use crate::space::{Action, Leaf, Observation, Value};

/// Action channel `gripper` in [0, 1]: 0 fully open, 1 fully closed.
/// Observation channel `gripper_width` in metres.
#[derive(Debug, Default)]
pub struct GripperWrapper {
    max_width: f64,
}

impl GripperWrapper {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn command_to_width(&self, g: f64) -> f64 {
        self.max_width * (1.0 - g.clamp(0.0, 1.0))
    }

    fn append(&self, mut obs: Observation, inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        let g = inner.gripper().ok_or_else(|| EnvError::mismatch("gripper", "inner environment has no gripper"))?;
        obs.channels.insert("gripper_width", Value::Scalar(g.width()));
        Ok(obs)
    }
}

impl Wrapper for GripperWrapper {
    fn name(&self) -> &str {
        "gripper"
    }

    fn bind(&mut self, inner: &dyn Environment) -> Result<EnvSpaces, EnvError> {
        self.max_width = inner.gripper_max_width().ok_or_else(|| EnvError::mismatch("gripper", "inner environment has no gripper"))?;
        let mut spaces = inner.spaces().clone();
        spaces.action.insert("gripper", Leaf::scalar(0.0, 1.0, ""))?;
        spaces.observation.insert("gripper_width", Leaf::scalar(0.0, self.max_width, "m"))?;
        Ok(spaces)
    }

    fn on_reset(&mut self, _seed: u64, obs: Observation, inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        self.append(obs, inner)
    }

    fn action(&mut self, mut action: Action, inner: &mut dyn Environment) -> Result<Action, EnvError> {
        let g = match action.channels.remove("gripper") {
            Some(Value::Scalar(g)) => g,
            _ => return Err(EnvError::mismatch("gripper", "missing scalar gripper command")),
        };
        let width = self.command_to_width(g);
        inner.gripper().ok_or_else(|| EnvError::mismatch("gripper", "inner environment has no gripper"))?.command_width(width);
        Ok(action)
    }

    fn observation(&mut self, obs: Observation, inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        self.append(obs, inner)
    }
}
