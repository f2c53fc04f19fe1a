//! Digital-twin safety gate.
//!
//! Before each step the twin is resynchronized from the protected
//! simulator's full state and runs the candidate action with a collision
//! interrupt. If the twin reports a contact or a safety-zone violation the
//! protected environment receives a hold action instead.

use std::sync::Arc;

use crate::env::{EnvError, EnvSpaces, Environment, Gripper, InfoValue, StepResult, Wrapper};
use crate::sim::model::CollisionInterrupt;
use crate::sim::{ControlMode, SimEnv, SimModel, SimState, StepOutcome};
use crate::space::{Action, Channels, Observation, Value};

pub const DEFAULT_DESYNC_TOLERANCE: f64 = 1e-6;

pub struct SafetyGate {
    twin_model: Option<Arc<SimModel>>,
    twin: Option<SimEnv>,
    tolerance: f64,
    veto_count: u64,
    last_veto: Option<String>,
    predicted: Option<Vec<f64>>,
    max_width: f64,
}

impl Default for SafetyGate {
    fn default() -> Self {
        Self::new()
    }
}

impl SafetyGate {
    /// The twin shares the protected simulator's model.
    pub fn new() -> Self {
        Self { twin_model: None, twin: None, tolerance: DEFAULT_DESYNC_TOLERANCE, veto_count: 0, last_veto: None, predicted: None, max_width: 0.0 }
    }

    /// Uses a separate model for the twin, e.g. one with extra keep-out
    /// geometry.
    pub fn with_twin_model(mut self, model: Arc<SimModel>) -> Self {
        self.twin_model = Some(model);
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn veto_count(&self) -> u64 {
        self.veto_count
    }

    fn twin(&mut self) -> &mut SimEnv {
        self.twin.as_mut().expect("bound before use")
    }

    fn hold(&self, action: &Action, state: &SimState, control: ControlMode) -> Action {
        let mut ch = Channels::new();
        for (name, _) in action.channels.iter() {
            let v = match (name.as_str(), control) {
                ("joint_target", _) => Value::Vector(state.joint_positions.clone()),
                ("cartesian_delta", _) => Value::Vector(vec![0.0; 6]),
                ("gripper", _) if self.max_width > 0.0 => Value::Scalar(1.0 - state.gripper_command / self.max_width),
                _ => action.channels.get(name).cloned().expect("iterating existing channels"),
            };
            ch.insert(name, v);
        }
        Action::new(ch)
    }
}

/// Runs `action` in `twin` with a collision interrupt; returns why it is
/// unsafe, if it is.
fn try_in_twin(twin: &mut SimEnv, action: &Action) -> Result<Option<String>, EnvError> {
    let model = twin.shared_model();
    let mut interrupt = CollisionInterrupt { zone: model.safety_zone() };
    let (_, outcome) = twin.step_with(action, &mut [&mut interrupt])?;
    if let StepOutcome::Interrupted { reason, .. } = outcome {
        return Ok(Some(reason));
    }
    Ok(twin.check_collision().map(|c| format!("contact {}/{} depth {:.4}", c.pair.0, c.pair.1, c.depth)))
}

fn apply_gripper_channel(twin: &mut SimEnv, action: &Action, max_width: f64) {
    if let Some(g) = action.channels.scalar("gripper") {
        twin.command_width(max_width * (1.0 - g.clamp(0.0, 1.0)));
    }
}

/// Steps a twin from `start` through `actions` and returns the index of the
/// first action whose motion makes contact or leaves the safety zone.
pub fn validate_path(model: Arc<SimModel>, start: &SimState, actions: &[Action]) -> Result<Option<usize>, EnvError> {
    let mut twin = SimEnv::from_model(model);
    twin.set_state(start.clone());
    let max_width = twin.model().gripper().map_or(0.0, |g| g.max_width);
    for (i, a) in actions.iter().enumerate() {
        apply_gripper_channel(&mut twin, a, max_width);
        if try_in_twin(&mut twin, a)?.is_some() {
            return Ok(Some(i));
        }
    }
    Ok(None)
}

impl Wrapper for SafetyGate {
    fn name(&self) -> &str {
        "safety_gate"
    }

    fn bind(&mut self, inner: &dyn Environment) -> Result<EnvSpaces, EnvError> {
        let sim = inner.sim().ok_or_else(|| EnvError::Config("the safety gate needs a simulated environment to shadow".into()))?;
        let model = self.twin_model.clone().unwrap_or_else(|| sim.shared_model());
        if model.chain.dof() != sim.model().chain.dof() {
            return Err(EnvError::Config("twin and protected arm differ in degrees of freedom".into()));
        }
        self.max_width = sim.model().gripper().map_or(0.0, |g| g.max_width);
        self.twin = Some(SimEnv::from_model(model));
        Ok(inner.spaces().clone())
    }

    fn on_reset(&mut self, _seed: u64, obs: Observation, inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        let state = inner.sim().expect("checked at bind").state().clone();
        self.twin().set_state(state);
        self.veto_count = 0;
        self.last_veto = None;
        self.predicted = None;
        Ok(obs)
    }

    fn action(&mut self, action: Action, inner: &mut dyn Environment) -> Result<Action, EnvError> {
        let sim = inner.sim().expect("checked at bind");
        let state = sim.state().clone();
        let (step, control) = (sim.control_step(), sim.model().scene.control);
        if let Some(pred) = self.predicted.take() {
            let divergence = pred.iter().zip(&state.joint_positions).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if divergence > self.tolerance {
                return Err(EnvError::TwinDesync { divergence });
            }
        }
        let max_width = self.max_width;
        let twin = self.twin();
        twin.set_state(state.clone());
        twin.set_control_step(step);
        apply_gripper_channel(twin, &action, max_width);
        let snapshot = twin.state().clone();
        self.last_veto = try_in_twin(twin, &action)?;
        let out = if self.last_veto.is_some() {
            self.veto_count += 1;
            let hold = self.hold(&action, &state, control);
            let twin = self.twin();
            twin.set_state(snapshot);
            twin.set_control_step(step);
            twin.step_with(&hold, &mut [])?;
            hold
        } else {
            action
        };
        self.predicted = Some(self.twin().state().joint_positions.clone());
        Ok(out)
    }

    fn after_step(&mut self, _action: &Action, result: &mut StepResult) -> Result<(), EnvError> {
        result.info.insert("vetoed".into(), InfoValue::Bool(self.last_veto.is_some()));
        result.info.insert("veto_count".into(), InfoValue::Int(self.veto_count as i64));
        if let Some(reason) = &self.last_veto {
            result.info.insert("veto_reason".into(), InfoValue::Text(reason.clone()));
        }
        Ok(())
    }
}
