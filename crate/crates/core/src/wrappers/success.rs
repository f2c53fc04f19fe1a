//! Lift success: the object rose by at least a threshold above its height
//! at reset.

use crate::env::{EnvError, EnvSpaces, Environment, InfoValue, StepResult, Wrapper};
use crate::space::{Action, Leaf, Observation, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessCriterion {
    pub object: String,
    /// Required rise above the initial height (m).
    pub lift_threshold: f64,
}

impl SuccessCriterion {
    pub fn new(object: &str, lift_threshold: f64) -> Result<Self, EnvError> {
        if !(lift_threshold > 0.0) {
            return Err(EnvError::Config(format!("lift threshold must be positive, got {lift_threshold}")));
        }
        Ok(Self { object: object.to_string(), lift_threshold })
    }

    pub fn pick_cuboid() -> Self {
        Self { object: "cuboid".into(), lift_threshold: 0.10 }
    }
}

/// Adds the discrete `success` channel, latches it until reset and ends the
/// episode (terminated) once it holds. Also records `info["success"]`.
pub struct SuccessWrapper {
    criterion: SuccessCriterion,
    initial_height: f64,
    success: bool,
}

impl SuccessWrapper {
    pub fn new(criterion: SuccessCriterion) -> Self {
        Self { criterion, initial_height: 0.0, success: false }
    }

    fn height(&self, obs: &Observation) -> Result<f64, EnvError> {
        obs.channels
            .dict("object_poses")
            .and_then(|d| d.vector(&self.criterion.object))
            .map(|p| p[2])
            .ok_or_else(|| EnvError::UnknownObject(self.criterion.object.clone()))
    }

    fn annotate(&self, mut obs: Observation) -> Observation {
        obs.channels.insert("success", Value::Discrete(self.success as u64));
        obs
    }
}

impl Wrapper for SuccessWrapper {
    fn name(&self) -> &str {
        "success"
    }

    fn bind(&mut self, inner: &dyn Environment) -> Result<EnvSpaces, EnvError> {
        let mut spaces = inner.spaces().clone();
        let has_object = matches!(
            spaces.observation.get("object_poses"),
            Some(Leaf::Dict { entries }) if entries.contains(&self.criterion.object)
        );
        if !has_object {
            return Err(EnvError::UnknownObject(self.criterion.object.clone()));
        }
        spaces.observation.insert("success", Leaf::Discrete { n: 2 })?;
        Ok(spaces)
    }

    fn on_reset(&mut self, _seed: u64, obs: Observation, _inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        self.initial_height = self.height(&obs)?;
        self.success = false;
        Ok(self.annotate(obs))
    }

    fn observation(&mut self, obs: Observation, _inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        if self.height(&obs)? - self.initial_height >= self.criterion.lift_threshold {
            self.success = true;
        }
        Ok(self.annotate(obs))
    }

    fn after_step(&mut self, _action: &Action, result: &mut StepResult) -> Result<(), EnvError> {
        result.info.insert("success".into(), InfoValue::Bool(self.success));
        if self.success {
            result.terminated = true;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::WrapperChain;
    use crate::se3::Pose;
    use crate::sim::{SceneConfig, SimEnv};
    use crate::space::Channels;

    fn chain() -> WrapperChain {
        let sim = SimEnv::new(SceneConfig::pick_cuboid()).unwrap();
        WrapperChain::build(Box::new(sim), vec![Box::new(SuccessWrapper::new(SuccessCriterion::pick_cuboid()))]).unwrap()
    }

    fn move_cuboid(c: &mut WrapperChain, dx: f64, dz: f64) -> StepResult {
        let sim = c.sim_mut().unwrap();
        let mut state = sim.state().clone();
        let i = state.object_index("cuboid").unwrap();
        state.objects[i].pose = Pose::translation(dx, 0.0, dz).compose(&state.objects[i].pose);
        sim.set_state(state);
        let q = sim.state().joint_positions.clone();
        c.step(Action::new(Channels::new().with("joint_target", Value::Vector(q)))).unwrap()
    }

    #[test]
    fn threshold_law() {
        let mut c = chain();
        let obs = c.reset(1).unwrap();
        assert_eq!(obs.channels.discrete("success"), Some(0));
        let r = move_cuboid(&mut c, 0.2, 0.0);
        assert_eq!(r.observation.channels.discrete("success"), Some(0));
        assert!(!r.terminated);
        let r = move_cuboid(&mut c, 0.0, 0.15);
        assert_eq!(r.observation.channels.discrete("success"), Some(1));
        assert!(r.terminated && r.flag("success"));
        // Latched even after the object drops back.
        let r = move_cuboid(&mut c, 0.0, -0.15);
        assert_eq!(r.observation.channels.discrete("success"), Some(1));
        c.reset(1).unwrap();
        let r = move_cuboid(&mut c, 0.0, 0.05);
        assert_eq!(r.observation.channels.discrete("success"), Some(0));
    }

    #[test]
    fn unknown_object_and_bad_threshold() {
        let sim = SimEnv::new(SceneConfig::pick_cuboid()).unwrap();
        let w = SuccessWrapper::new(SuccessCriterion { object: "mug".into(), lift_threshold: 0.1 });
        assert!(matches!(WrapperChain::build(Box::new(sim), vec![Box::new(w)]), Err(EnvError::UnknownObject(_))));
        assert!(SuccessCriterion::new("cuboid", 0.0).is_err());
    }
}
