//! The simulator as a base environment.
//!
//! Observation channels: `joint_positions`, `joint_velocities`, `ee_pose`
//! (`[x, y, z, qw, qx, qy, qz]`), `object_poses` (dict of object id to pose)
//! and `grasped` (0 or 1). Action: `joint_target` (absolute, rad) or
//! `cartesian_delta` (`[dx, dy, dz, rx, ry, rz]` in the base frame, rotation
//! as a rotation vector), depending on the scene's control mode.
//!
//! In asynchronous mode a step runs a fixed number of micro-steps and the
//! observation is the latest completed micro-step, possibly mid-motion.

use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};

use crate::env::{EnvError, EnvSpaces, Environment, Gripper, Info, InfoValue, StepResult};
use crate::kin::IkParams;
use crate::se3::Pose;
use crate::space::{Action, Channels, Leaf, Observation, SpaceDescriptor, Value};

use super::collision::{check_collision, Contact};
use super::model::{step_fixed, Control, step_until_converged, CollisionInterrupt, SimModel, SimState, StepCallback, StepOutcome};
use super::render::{render, CameraModel, RenderOutput};
use super::scene::{ControlMode, SceneConfig, StepMode};

pub const CARTESIAN_LIMITS: [f64; 6] = [0.05, 0.05, 0.05, 0.25, 0.25, 0.25];
const POSE_BOUND: f64 = 10.0;

pub struct SimEnv {
    model: Arc<SimModel>,
    state: SimState,
    spaces: EnvSpaces,
    control_step: u64,
    was_reset: bool,
}

impl SimEnv {
    pub fn new(scene: SceneConfig) -> Result<Self, EnvError> {
        Ok(Self::from_model(Arc::new(SimModel::new(scene)?)))
    }

    pub fn from_model(model: Arc<SimModel>) -> Self {
        let spaces = spaces_for(&model);
        let state = model.initial_state(0);
        Self { model, state, spaces, control_step: 0, was_reset: false }
    }

    pub fn model(&self) -> &SimModel {
        &self.model
    }

    pub fn shared_model(&self) -> Arc<SimModel> {
        self.model.clone()
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Overwrites the state (twin resync); derived quantities are refreshed.
    pub fn set_state(&mut self, mut state: SimState) {
        state.refresh(&self.model.chain);
        self.state = state;
        self.was_reset = true;
    }

    pub fn control_step(&self) -> u64 {
        self.control_step
    }

    pub fn set_control_step(&mut self, step: u64) {
        self.control_step = step;
    }

    pub fn observe(&self) -> Observation {
        observe(&self.state, self.control_step)
    }

    pub fn render(&self, camera: &CameraModel) -> RenderOutput {
        render(&self.model, camera, &self.state)
    }

    pub fn check_collision(&self) -> Option<Contact> {
        check_collision(&self.model, &self.state, self.model.safety_zone())
    }

    /// Joint targets the action commands from the current state. Cartesian
    /// deltas go through DLS IK seeded at the current joints; when IK fails
    /// the arm holds and `Ok(None)` is returned.
    pub fn joint_targets(&self, action: &Action) -> Result<Option<Vec<f64>>, EnvError> {
        match self.model.scene.control {
            ControlMode::Joint => {
                let q = action.channels.vector("joint_target").ok_or_else(|| EnvError::mismatch("joint_target", "missing"))?;
                if q.len() != self.model.chain.dof() {
                    return Err(EnvError::mismatch("joint_target", format!("expected {} values", self.model.chain.dof())));
                }
                Ok(Some(q.to_vec()))
            }
            ControlMode::Cartesian => {
                let d = action
                    .channels
                    .vector("cartesian_delta")
                    .ok_or_else(|| EnvError::mismatch("cartesian_delta", "missing"))?;
                if d.len() != 6 {
                    return Err(EnvError::mismatch("cartesian_delta", "expected 6 values"));
                }
                let q0 = &self.state.joint_positions;
                if d.iter().all(|x| *x == 0.0) {
                    return Ok(Some(q0.clone()));
                }
                let target = apply_cartesian_delta(&self.state.ee_pose(), d);
                Ok(self.model.chain.ik_dls(&target, q0, &IkParams::default()).ok().map(|s| s.q))
            }
        }
    }

    /// Steps with extra micro-step callbacks; also reports how the step ended.
    pub fn step_with(
        &mut self,
        action: &Action,
        callbacks: &mut [&mut dyn StepCallback],
    ) -> Result<(StepResult, StepOutcome), EnvError> {
        if !self.was_reset {
            return Err(EnvError::NotReset);
        }
        let mut info = Info::new();
        let targets = match self.joint_targets(action)? {
            Some(t) => t,
            None => {
                info.insert("ik_failed".into(), InfoValue::Bool(true));
                self.state.joint_positions.clone()
            }
        };
        let gripper = self.state.gripper_command;
        let model = self.model.clone();
        let mut combined = Combined {
            interrupt: model.scene.interrupt_on_collision.then_some(CollisionInterrupt { zone: model.safety_zone() }),
            rest: callbacks,
        };
        let all: &mut [&mut dyn StepCallback] = &mut [&mut combined];
        let outcome = match model.scene.mode {
            StepMode::Sync => {
                step_until_converged(&model, &mut self.state, &targets, gripper, all, model.scene.max_micro_steps)
            }
            StepMode::Async => step_fixed(&model, &mut self.state, &targets, gripper, all, model.scene.async_micro_steps),
        };
        self.control_step += 1;
        info.insert("micro_steps".into(), InfoValue::Int(outcome.micro_steps() as i64));
        info.insert("outcome".into(), InfoValue::Text(outcome.label().into()));
        if let StepOutcome::Interrupted { reason, .. } = &outcome {
            info.insert("interrupt".into(), InfoValue::Text(reason.clone()));
        }
        let result = StepResult {
            observation: self.observe(),
            reward: 0.0,
            terminated: false,
            truncated: self.control_step >= model.scene.max_episode_steps,
            info,
        };
        Ok((result, outcome))
    }
}

struct Combined<'a, 'b, 'z> {
    interrupt: Option<CollisionInterrupt<'z>>,
    rest: &'a mut [&'b mut dyn StepCallback],
}

impl StepCallback for Combined<'_, '_, '_> {
    fn after_micro_step(&mut self, model: &SimModel, state: &SimState) -> Control {
        if let Some(i) = &mut self.interrupt {
            if let c @ Control::Interrupt(_) = i.after_micro_step(model, state) {
                return c;
            }
        }
        for cb in self.rest.iter_mut() {
            match cb.after_micro_step(model, state) {
                Control::Continue => {}
                other => return other,
            }
        }
        Control::Continue
    }
}

pub fn apply_cartesian_delta(ee: &Pose, d: &[f64]) -> Pose {
    let rot = UnitQuaternion::from_scaled_axis(Vector3::new(d[3], d[4], d[5]));
    Pose::new(rot * ee.rotation, ee.translation + Vector3::new(d[0], d[1], d[2]))
}

fn pose_leaf() -> Leaf {
    Leaf::uniform_vector(7, -POSE_BOUND, POSE_BOUND)
}

fn spaces_for(model: &SimModel) -> EnvSpaces {
    let chain = &model.chain;
    let vmax: Vec<f64> = chain.velocity_limits().iter().map(|v| 2.0 * v).collect();
    let mut objects = SpaceDescriptor::new();
    for o in &model.scene.objects {
        objects = objects.with(&o.id, pose_leaf());
    }
    let observation = SpaceDescriptor::new()
        .with("joint_positions", Leaf::vector(chain.lower_limits(), chain.upper_limits()))
        .with("joint_velocities", Leaf::vector(vmax.iter().map(|v| -v).collect(), vmax))
        .with("ee_pose", pose_leaf())
        .with("object_poses", Leaf::Dict { entries: objects })
        .with("grasped", Leaf::Discrete { n: 2 });
    let action = match model.scene.control {
        ControlMode::Joint => {
            SpaceDescriptor::new().with("joint_target", Leaf::vector(chain.lower_limits(), chain.upper_limits()))
        }
        ControlMode::Cartesian => SpaceDescriptor::new().with(
            "cartesian_delta",
            Leaf::vector(CARTESIAN_LIMITS.iter().map(|x| -x).collect(), CARTESIAN_LIMITS.to_vec()),
        ),
    };
    EnvSpaces { observation, action }
}

pub fn observe(state: &SimState, step: u64) -> Observation {
    let mut objects = Channels::new();
    for o in &state.objects {
        objects.insert(&o.id, Value::Vector(o.pose.to_array().to_vec()));
    }
    let ch = Channels::new()
        .with("joint_positions", Value::Vector(state.joint_positions.clone()))
        .with("joint_velocities", Value::Vector(state.joint_velocities.clone()))
        .with("ee_pose", Value::Vector(state.ee_pose().to_array().to_vec()))
        .with("object_poses", Value::Dict(objects))
        .with("grasped", Value::Discrete(state.attachment.is_some() as u64));
    Observation::new(step, ch)
}

impl Environment for SimEnv {
    fn spaces(&self) -> &EnvSpaces {
        &self.spaces
    }

    fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        self.state = self.model.initial_state(seed);
        self.control_step = 0;
        self.was_reset = true;
        Ok(self.observe())
    }

    fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        Ok(self.step_with(&action, &mut [])?.0)
    }

    fn gripper(&mut self) -> Option<&mut dyn Gripper> {
        if self.model.gripper().is_some() {
            Some(self)
        } else {
            None
        }
    }

    fn gripper_max_width(&self) -> Option<f64> {
        self.model.gripper().map(|g| g.max_width)
    }

    fn sim(&self) -> Option<&SimEnv> {
        Some(self)
    }

    fn sim_mut(&mut self) -> Option<&mut SimEnv> {
        Some(self)
    }
}

impl Gripper for SimEnv {
    fn max_width(&self) -> f64 {
        self.model.gripper().map_or(0.0, |g| g.max_width)
    }

    fn width(&self) -> f64 {
        self.state.gripper_width
    }

    fn commanded_width(&self) -> f64 {
        self.state.gripper_command
    }

    fn command_width(&mut self, width: f64) {
        self.state.gripper_command = width.clamp(0.0, self.max_width());
    }
}
