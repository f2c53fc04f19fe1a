//! Policies, chunk consumption and the built-in baselines.
//!
//! A [`Policy`] maps one observation to a chunk of up to `horizon` future
//! actions. A [`ChunkedAgent`] sits on the environment side and hands those
//! actions out one per step, asking for a new chunk when the current one is
//! exhausted or every `replan_every` steps.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::EnvError;
use crate::kin::IkParams;
use crate::se3::{interpolate_linear, Pose};
use crate::sim::{ControlMode, SimModel};
use crate::space::{Action, Channels, Leaf, Observation, SpaceDescriptor, Value};

pub trait Policy: Send {
    fn name(&self) -> &str;

    /// Action schema the policy emits; `None` adapts to whatever is asked.
    fn action_space(&self) -> Option<&SpaceDescriptor> {
        None
    }

    /// Channels the policy reads; the session's observation must contain them.
    fn observation_space(&self) -> Option<&SpaceDescriptor> {
        None
    }

    fn reset(&mut self, _seed: u64) -> Result<(), EnvError> {
        Ok(())
    }

    /// Between 1 and `horizon` actions, the first applied at `obs.step`.
    fn act_chunk(&mut self, obs: &Observation, horizon: usize) -> Result<Vec<Action>, EnvError>;
}

impl Policy for Box<dyn Policy> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn action_space(&self) -> Option<&SpaceDescriptor> {
        (**self).action_space()
    }
    fn observation_space(&self) -> Option<&SpaceDescriptor> {
        (**self).observation_space()
    }
    fn reset(&mut self, seed: u64) -> Result<(), EnvError> {
        (**self).reset(seed)
    }
    fn act_chunk(&mut self, obs: &Observation, horizon: usize) -> Result<Vec<Action>, EnvError> {
        (**self).act_chunk(obs, horizon)
    }
}

/// Environment-side decision maker: one action per step.
pub trait Agent: Send {
    fn reset(&mut self, seed: u64) -> Result<(), EnvError>;
    fn act(&mut self, obs: &Observation) -> Result<Action, EnvError>;
}

pub struct ChunkedAgent<P> {
    policy: P,
    horizon: usize,
    replan_every: usize,
    queue: VecDeque<Action>,
    since_fetch: usize,
    fetches: u64,
}

impl<P: Policy> ChunkedAgent<P> {
    pub fn new(policy: P, horizon: usize, replan_every: usize) -> Self {
        let horizon = horizon.max(1);
        Self { policy, horizon, replan_every: replan_every.clamp(1, horizon), queue: VecDeque::new(), since_fetch: 0, fetches: 0 }
    }

    /// Next-step prediction: one query per step.
    pub fn per_step(policy: P) -> Self {
        Self::new(policy, 1, 1)
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut P {
        &mut self.policy
    }

    /// Number of chunks requested so far.
    pub fn fetches(&self) -> u64 {
        self.fetches
    }
}

impl<P: Policy> Agent for ChunkedAgent<P> {
    fn reset(&mut self, seed: u64) -> Result<(), EnvError> {
        self.queue.clear();
        self.since_fetch = 0;
        self.policy.reset(seed)
    }

    fn act(&mut self, obs: &Observation) -> Result<Action, EnvError> {
        if self.queue.is_empty() || self.since_fetch >= self.replan_every {
            let chunk = self.policy.act_chunk(obs, self.horizon)?;
            if chunk.is_empty() || chunk.len() > self.horizon {
                return Err(EnvError::Policy(format!("{} returned {} actions for horizon {}", self.policy.name(), chunk.len(), self.horizon)));
            }
            self.queue = chunk.into();
            self.since_fetch = 0;
            self.fetches += 1;
        }
        self.since_fetch += 1;
        Ok(self.queue.pop_front().expect("queue refilled above"))
    }
}

type ChunkFn = dyn FnMut(&Observation, usize) -> Result<Vec<Action>, EnvError> + Send;

/// A policy from a closure.
pub struct FnPolicy {
    name: String,
    f: Box<ChunkFn>,
    action_space: Option<SpaceDescriptor>,
}

impl FnPolicy {
    pub fn new(name: &str, f: impl FnMut(&Observation, usize) -> Result<Vec<Action>, EnvError> + Send + 'static) -> Self {
        Self { name: name.to_string(), f: Box::new(f), action_space: None }
    }

    pub fn with_action_space(mut self, space: SpaceDescriptor) -> Self {
        self.action_space = Some(space);
        self
    }
}

impl Policy for FnPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn action_space(&self) -> Option<&SpaceDescriptor> {
        self.action_space.as_ref()
    }

    fn act_chunk(&mut self, obs: &Observation, horizon: usize) -> Result<Vec<Action>, EnvError> {
        (self.f)(obs, horizon)
    }
}

/// Uniform samples from the action space, seeded per episode.
pub struct RandomPolicy {
    space: SpaceDescriptor,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(space: SpaceDescriptor) -> Self {
        Self { space, rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn action_space(&self) -> Option<&SpaceDescriptor> {
        Some(&self.space)
    }

    fn reset(&mut self, seed: u64) -> Result<(), EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7A4D_0A11);
        Ok(())
    }

    fn act_chunk(&mut self, _obs: &Observation, horizon: usize) -> Result<Vec<Action>, EnvError> {
        Ok((0..horizon).map(|_| Action::new(self.space.sample(&mut self.rng))).collect())
    }
}

/// Keeps the arm where it is: joint targets copy the measured joints,
/// Cartesian deltas are zero, the gripper keeps its commanded opening.
pub struct HoldPolicy {
    space: SpaceDescriptor,
    max_width: Option<f64>,
}

impl HoldPolicy {
    pub fn new(space: SpaceDescriptor, max_width: Option<f64>) -> Self {
        Self { space, max_width }
    }
}

/// The neutral action for `space` given the latest observation.
pub fn hold_action(space: &SpaceDescriptor, obs: &Observation, max_width: Option<f64>) -> Result<Action, EnvError> {
    let mut ch = Channels::new();
    for (name, leaf) in space.iter() {
        let value = match (name.as_str(), leaf) {
            ("joint_target", _) => Value::Vector(
                obs.channels.vector("joint_positions").ok_or_else(|| EnvError::mismatch("joint_positions", "hold needs the measured joints"))?.to_vec(),
            ),
            ("gripper", Leaf::Scalar { .. }) => {
                let closed = match (obs.channels.scalar("gripper_width"), max_width) {
                    (Some(w), Some(max)) if max > 0.0 => (1.0 - w / max).clamp(0.0, 1.0),
                    _ => 0.0,
                };
                Value::Scalar(closed)
            }
            (_, Leaf::Scalar { low, high, .. }) => Value::Scalar(0.0f64.clamp(*low, *high)),
            (_, Leaf::Vector { dim, low, high }) => Value::Vector((0..*dim).map(|i| 0.0f64.clamp(low[i], high[i])).collect()),
            (_, Leaf::Discrete { .. }) => Value::Discrete(0),
            (other, _) => return Err(EnvError::mismatch(other, "hold has no neutral value for this channel kind")),
        };
        ch.insert(name, value);
    }
    Ok(Action::new(ch))
}

impl Policy for HoldPolicy {
    fn name(&self) -> &str {
        "hold"
    }

    fn action_space(&self) -> Option<&SpaceDescriptor> {
        Some(&self.space)
    }

    fn act_chunk(&mut self, obs: &Observation, horizon: usize) -> Result<Vec<Action>, EnvError> {
        let a = hold_action(&self.space, obs, self.max_width)?;
        Ok(vec![a; horizon])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedPickConfig {
    pub object: String,
    pub pre_grasp_height: f64,
    pub lift_height: f64,
    /// Largest end-effector translation per control step (m).
    pub step_length: f64,
    pub close_steps: usize,
    /// Grasp point noise, uniform in ±`jitter` along x and y (m).
    pub jitter: f64,
}

impl Default for ScriptedPickConfig {
    fn default() -> Self {
        Self { object: "cuboid".into(), pre_grasp_height: 0.10, lift_height: 0.15, step_length: 0.02, close_steps: 3, jitter: 0.01 }
    }
}

/// Ground-truth oracle: linear end-effector waypoints home → pre-grasp →
/// grasp → close → lift, planned once per episode from the object pose in
/// the first observation. Joint-target actions come from IK along the plan;
/// Cartesian actions steer toward the plan from the measured pose.
pub struct ScriptedPick {
    model: Arc<SimModel>,
    config: ScriptedPickConfig,
    space: SpaceDescriptor,
    rng: ChaCha8Rng,
    offset: [f64; 2],
    plan: Vec<(Pose, Vec<f64>, f64)>,
    start_step: u64,
}

impl ScriptedPick {
    pub fn new(model: Arc<SimModel>, action_space: SpaceDescriptor, config: ScriptedPickConfig) -> Self {
        Self { model, config, space: action_space, rng: ChaCha8Rng::seed_from_u64(0), offset: [0.0; 2], plan: Vec::new(), start_step: 0 }
    }

    /// Planned end-effector poses, one per control step.
    pub fn waypoints(&self) -> impl Iterator<Item = &Pose> {
        self.plan.iter().map(|(p, _, _)| p)
    }

    /// Grasp-point offset drawn for this episode.
    pub fn grasp_offset(&self) -> [f64; 2] {
        self.offset
    }

    fn build_plan(&mut self, obs: &Observation) -> Result<(), EnvError> {
        let cfg = &self.config;
        let q0 = obs.channels.vector("joint_positions").ok_or_else(|| EnvError::mismatch("joint_positions", "missing"))?.to_vec();
        let ee0 = self.model.chain.ee_pose(&q0)?;
        let obj = obs
            .channels
            .dict("object_poses")
            .and_then(|d| d.vector(&cfg.object))
            .and_then(Pose::from_slice)
            .ok_or_else(|| EnvError::UnknownObject(cfg.object.clone()))?;
        let delta = wrap_quarter_turn(obj.yaw() - ee0.yaw());
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), delta) * ee0.rotation;
        let grasp_at = obj.translation + Vector3::new(self.offset[0], self.offset[1], 0.0);
        let grasp = Pose::new(rotation, grasp_at);
        let pre = Pose::new(rotation, grasp_at + Vector3::new(0.0, 0.0, cfg.pre_grasp_height));
        let lift = Pose::new(rotation, grasp_at + Vector3::new(0.0, 0.0, cfg.lift_height));

        let mut poses: Vec<(Pose, f64)> = Vec::new();
        let mut from = ee0;
        for (goal, gripper) in [(pre, 0.0), (grasp, 0.0)] {
            poses.extend(segment(&from, &goal, cfg.step_length).into_iter().map(|p| (p, gripper)));
            from = goal;
        }
        poses.extend((0..cfg.close_steps).map(|_| (grasp, 1.0)));
        poses.extend(segment(&grasp, &lift, cfg.step_length).into_iter().map(|p| (p, 1.0)));

        let params = IkParams::default();
        let mut q = q0;
        self.plan = poses
            .into_iter()
            .map(|(pose, g)| {
                if let Ok(sol) = self.model.chain.ik_dls(&pose, &q, &params) {
                    q = sol.q;
                }
                (pose, q.clone(), g)
            })
            .collect();
        self.start_step = obs.step;
        Ok(())
    }

    fn action_at(&self, index: usize, from: &Pose) -> (Action, Pose) {
        let (pose, q, g) = &self.plan[index.min(self.plan.len() - 1)];
        let mut ch = Channels::new();
        for name in self.space.names() {
            match name {
                "joint_target" => ch.insert(name, Value::Vector(q.clone())),
                "cartesian_delta" => ch.insert(name, Value::Vector(cartesian_delta(from, pose).to_vec())),
                "gripper" => ch.insert(name, Value::Scalar(*g)),
                _ => None,
            };
        }
        (Action::new(ch), *pose)
    }
}

impl Policy for ScriptedPick {
    fn name(&self) -> &str {
        "scripted"
    }

    fn action_space(&self) -> Option<&SpaceDescriptor> {
        Some(&self.space)
    }

    fn reset(&mut self, seed: u64) -> Result<(), EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9A5B_17C4_0DDB_A11);
        let j = self.config.jitter;
        self.offset = if j > 0.0 { [self.rng.gen_range(-j..=j), self.rng.gen_range(-j..=j)] } else { [0.0; 2] };
        self.plan.clear();
        Ok(())
    }

    fn act_chunk(&mut self, obs: &Observation, horizon: usize) -> Result<Vec<Action>, EnvError> {
        if self.plan.is_empty() {
            self.build_plan(obs)?;
        }
        let first = obs.step.saturating_sub(self.start_step) as usize;
        let mut from = match self.model.scene.control {
            ControlMode::Cartesian => obs
                .channels
                .vector("ee_pose")
                .and_then(Pose::from_slice)
                .ok_or_else(|| EnvError::mismatch("ee_pose", "missing"))?,
            ControlMode::Joint => Pose::identity(),
        };
        Ok((0..horizon)
            .map(|i| {
                let (a, reached) = self.action_at(first + i, &from);
                from = reached;
                a
            })
            .collect())
    }
}

/// Straight segment in steps of at most `step_length`.
fn segment(from: &Pose, to: &Pose, step_length: f64) -> Vec<Pose> {
    let n = ((to.translation - from.translation).norm() / step_length).ceil().max(1.0) as usize;
    interpolate_linear(from, to, n)
}

/// Folds an angle into [−π/4, π/4] modulo a quarter turn: a parallel
/// gripper grasps a square face equally well rotated by π/2.
pub fn wrap_quarter_turn(angle: f64) -> f64 {
    angle - FRAC_PI_2 * ((angle + FRAC_PI_4) / FRAC_PI_2).floor()
}

/// The delta that moves `from` onto `to` under the simulator's Cartesian
/// convention (world-frame translation, then world-frame rotation vector).
pub fn cartesian_delta(from: &Pose, to: &Pose) -> [f64; 6] {
    let t = to.translation - from.translation;
    let r = (to.rotation * from.rotation.inverse()).scaled_axis();
    [t.x, t.y, t.z, r.x, r.y, r.z]
}
