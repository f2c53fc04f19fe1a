//! Potential-based reward shaping with a discrete success bonus.

use nalgebra::Vector3;

use crate::env::{EnvError, EnvSpaces, Environment, InfoValue, StepResult, Wrapper};
use crate::space::{Action, Observation};

/// State potential Φ evaluated on the wrapper's inner observation.
pub trait Potential: Send {
    fn phi(&self, obs: &Observation) -> Result<f64, EnvError>;

    /// Checks at bind time that Φ can be evaluated on `spaces`.
    fn check(&self, _spaces: &EnvSpaces) -> Result<(), EnvError> {
        Ok(())
    }
}

impl<F: Fn(&Observation) -> f64 + Send> Potential for F {
    fn phi(&self, obs: &Observation) -> Result<f64, EnvError> {
        Ok(self(obs))
    }
}

/// Default pick potential:
/// `Φ = −‖p_ee − p_obj‖ − |h_target − h_obj| + 1[grasped]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PickPotential {
    pub object: String,
    /// Absolute object height that counts as lifted (m).
    pub target_height: f64,
}

impl PickPotential {
    pub fn new(object: &str, target_height: f64) -> Self {
        Self { object: object.to_string(), target_height }
    }
}

impl Potential for PickPotential {
    fn phi(&self, obs: &Observation) -> Result<f64, EnvError> {
        let ee = obs.channels.vector("ee_pose").ok_or_else(|| EnvError::mismatch("ee_pose", "missing"))?;
        let obj = obs
            .channels
            .dict("object_poses")
            .and_then(|d| d.vector(&self.object))
            .ok_or_else(|| EnvError::UnknownObject(self.object.clone()))?;
        let grasped = obs.channels.discrete("grasped").unwrap_or(0) as f64;
        let d = (Vector3::new(ee[0], ee[1], ee[2]) - Vector3::new(obj[0], obj[1], obj[2])).norm();
        let phi = -d - (self.target_height - obj[2]).abs() + grasped;
        if !phi.is_finite() {
            return Err(EnvError::mismatch("ee_pose", "potential is not finite"));
        }
        Ok(phi)
    }

    fn check(&self, spaces: &EnvSpaces) -> Result<(), EnvError> {
        let obs = &spaces.observation;
        if !obs.contains("ee_pose") {
            return Err(EnvError::mismatch("ee_pose", "pick potential needs the end-effector pose"));
        }
        match obs.get("object_poses") {
            Some(crate::space::Leaf::Dict { entries }) if entries.contains(&self.object) => Ok(()),
            _ => Err(EnvError::UnknownObject(self.object.clone())),
        }
    }
}

/// `R′(s, a, s′) = R + γΦ(s′) − Φ(s) + bonus·1[success]`. The raw reward
/// stays in `info["raw_reward"]`; `info["pbrs/shaping"]` holds
/// `γΦ(s′) − Φ(s)` and `info["pbrs/phi"]` holds `Φ(s′)`.
pub struct PbrsWrapper {
    potential: Box<dyn Potential>,
    gamma: f64,
    success_bonus: f64,
    phi_prev: f64,
    phi_next: f64,
}

impl PbrsWrapper {
    pub fn new(potential: Box<dyn Potential>, gamma: f64, success_bonus: f64) -> Result<Self, EnvError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(EnvError::Config(format!("discount must lie in (0, 1], got {gamma}")));
        }
        if !success_bonus.is_finite() {
            return Err(EnvError::Config("success bonus must be finite".into()));
        }
        Ok(Self { potential, gamma, success_bonus, phi_prev: 0.0, phi_next: 0.0 })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

fn succeeded(result: &StepResult) -> bool {
    result.observation.channels.discrete("success") == Some(1) || result.flag("success")
}

impl Wrapper for PbrsWrapper {
    fn name(&self) -> &str {
        "pbrs"
    }

    fn bind(&mut self, inner: &dyn Environment) -> Result<EnvSpaces, EnvError> {
        self.potential.check(inner.spaces())?;
        Ok(inner.spaces().clone())
    }

    fn on_reset(&mut self, _seed: u64, obs: Observation, _inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        self.phi_prev = self.potential.phi(&obs)?;
        self.phi_next = self.phi_prev;
        Ok(obs)
    }

    fn observation(&mut self, obs: Observation, _inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        self.phi_next = self.potential.phi(&obs)?;
        Ok(obs)
    }

    fn reward(&mut self, result: &StepResult) -> Option<f64> {
        let shaping = self.gamma * self.phi_next - self.phi_prev;
        let bonus = if succeeded(result) { self.success_bonus } else { 0.0 };
        Some(result.reward + shaping + bonus)
    }

    fn after_step(&mut self, _action: &Action, result: &mut StepResult) -> Result<(), EnvError> {
        result.info.insert("pbrs/phi".into(), InfoValue::Float(self.phi_next));
        result.info.insert("pbrs/shaping".into(), InfoValue::Float(self.gamma * self.phi_next - self.phi_prev));
        self.phi_prev = self.phi_next;
        Ok(())
    }
}
