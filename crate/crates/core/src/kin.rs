//! Serial revolute chains: forward kinematics, geometric Jacobian and
//! damped-least-squares inverse kinematics.

use std::path::Path;

use nalgebra::{Matrix6, Matrix6xX, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{Pose, PoseRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinError {
    #[error("expected {expected} joint values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("chain file: {0}")]
    Parse(String),
    #[error("unknown chain fixture {0:?}")]
    UnknownFixture(String),
}

/// Line segment with radius, endpoints in the owning link frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub radius: f64,
    pub a: [f64; 3],
    pub b: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    /// Fixed transform from the parent link frame to this joint's frame at q = 0.
    pub offset: Pose,
    pub axis: Vector3<f64>,
    pub limits: (f64, f64),
    pub velocity_limit: f64,
    pub capsule: Option<Capsule>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub name: String,
    pub joints: Vec<Joint>,
    pub ee_offset: Pose,
    /// Link pairs with index distance below this skip self-collision tests.
    pub self_collision_min_gap: usize,
    pub home: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    pub ee: Pose,
    /// Frame of each joint after its rotation; link capsules live here.
    pub links: Vec<Pose>,
}

#[derive(Deserialize, Serialize)]
struct JointFile {
    name: String,
    offset: PoseRecord,
    axis: [f64; 3],
    limits: [f64; 2],
    velocity_limit: f64,
    capsule: Option<Capsule>,
}

#[derive(Deserialize, Serialize)]
struct ChainFile {
    name: String,
    #[serde(default = "default_gap")]
    self_collision_min_gap: usize,
    #[serde(default)]
    home: Option<Vec<f64>>,
    joints: Vec<JointFile>,
    ee_offset: PoseRecord,
}

fn default_gap() -> usize {
    2
}

const PLANAR_2DOF: &str = include_str!("../fixtures/chains/planar-2dof.toml");
const FR3_LIKE_7DOF: &str = include_str!("../fixtures/chains/fr3-like-7dof.toml");

impl KinematicChain {
    pub fn new(name: &str, joints: Vec<Joint>, ee_offset: Pose) -> Result<Self, KinError> {
        let chain = Self { name: name.to_string(), joints, ee_offset, self_collision_min_gap: 2, home: None };
        chain.check()?;
        Ok(chain)
    }

    fn check(&self) -> Result<(), KinError> {
        if self.joints.is_empty() {
            return Err(KinError::InvalidChain("chain needs at least one joint".into()));
        }
        for j in &self.joints {
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(KinError::InvalidChain(format!("{}: axis must be unit length", j.name)));
            }
            if !(j.limits.0 < j.limits.1) {
                return Err(KinError::InvalidChain(format!("{}: limits need low < high", j.name)));
            }
            if !(j.velocity_limit > 0.0) {
                return Err(KinError::InvalidChain(format!("{}: velocity limit must be positive", j.name)));
            }
        }
        if let Some(home) = &self.home {
            if home.len() != self.dof() {
                return Err(KinError::InvalidChain("home has the wrong length".into()));
            }
            if !self.within_limits(home) {
                return Err(KinError::InvalidChain("home violates joint limits".into()));
            }
        }
        Ok(())
    }

    /// Parses the TOML chain schema (see `fixtures/chains/*.toml`).
    pub fn from_toml(text: &str) -> Result<Self, KinError> {
        let file: ChainFile = toml::from_str(text).map_err(|e| KinError::Parse(e.to_string()))?;
        let joints = file
            .joints
            .into_iter()
            .map(|j| Joint {
                name: j.name,
                offset: j.offset.into(),
                axis: Vector3::from(j.axis),
                limits: (j.limits[0], j.limits[1]),
                velocity_limit: j.velocity_limit,
                capsule: j.capsule,
            })
            .collect();
        let chain = Self {
            name: file.name,
            joints,
            ee_offset: file.ee_offset.into(),
            self_collision_min_gap: file.self_collision_min_gap,
            home: file.home,
        };
        chain.check()?;
        Ok(chain)
    }

    pub fn load(path: &Path) -> Result<Self, KinError> {
        let text = std::fs::read_to_string(path).map_err(|e| KinError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Bundled chains: `planar-2dof` and `fr3-like-7dof`.
    pub fn fixture(name: &str) -> Result<Self, KinError> {
        match name {
            "planar-2dof" => Self::from_toml(PLANAR_2DOF),
            "fr3-like-7dof" => Self::from_toml(FR3_LIKE_7DOF),
            other => Err(KinError::UnknownFixture(other.to_string())),
        }
    }

    /// Resolves a fixture name or a path to a chain file.
    pub fn resolve(reference: &str) -> Result<Self, KinError> {
        match Self::fixture(reference) {
            Err(KinError::UnknownFixture(_)) => Self::load(Path::new(reference)),
            other => other,
        }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn home(&self) -> Vec<f64> {
        self.home.clone().unwrap_or_else(|| self.joints.iter().map(|j| 0.5 * (j.limits.0 + j.limits.1)).collect())
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.iter().zip(&self.joints).all(|(x, j)| *x >= j.limits.0 && *x <= j.limits.1)
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (x, j) in q.iter_mut().zip(&self.joints) {
            *x = x.clamp(j.limits.0, j.limits.1);
        }
    }

    pub fn lower_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.limits.0).collect()
    }

    pub fn upper_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.limits.1).collect()
    }

    pub fn velocity_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.velocity_limit).collect()
    }

    /// Sum of offset and end-effector translation lengths: a reach bound.
    pub fn max_reach(&self) -> f64 {
        self.joints.iter().map(|j| j.offset.translation.norm()).sum::<f64>() + self.ee_offset.translation.norm()
    }

    fn check_dim(&self, q: &[f64]) -> Result<(), KinError> {
        if q.len() != self.dof() {
            return Err(KinError::DimensionMismatch { expected: self.dof(), got: q.len() });
        }
        Ok(())
    }

    pub fn fk(&self, q: &[f64]) -> Result<FkResult, KinError> {
        self.check_dim(q)?;
        let mut frame = Pose::identity();
        let mut links = Vec::with_capacity(self.dof());
        for (joint, angle) in self.joints.iter().zip(q) {
            frame = frame.compose(&joint.offset).compose(&Pose::rotation_axis_angle(joint.axis, *angle));
            links.push(frame);
        }
        Ok(FkResult { ee: frame.compose(&self.ee_offset), links })
    }

    pub fn ee_pose(&self, q: &[f64]) -> Result<Pose, KinError> {
        Ok(self.fk(q)?.ee)
    }

    /// Geometric Jacobian in the base frame, linear rows first.
    pub fn jacobian(&self, q: &[f64]) -> Result<Matrix6xX<f64>, KinError> {
        let fk = self.fk(q)?;
        Ok(self.jacobian_from(&fk))
    }

    fn jacobian_from(&self, fk: &FkResult) -> Matrix6xX<f64> {
        let p_ee = fk.ee.translation;
        let mut j = Matrix6xX::zeros(self.dof());
        for (i, (frame, joint)) in fk.links.iter().zip(&self.joints).enumerate() {
            let w = frame.transform_vector(&joint.axis);
            let v = w.cross(&(p_ee - frame.translation));
            j.fixed_view_mut::<3, 1>(0, i).copy_from(&v);
            j.fixed_view_mut::<3, 1>(3, i).copy_from(&w);
        }
        j
    }

    /// Damped least squares: Δq = step_scale · Jᵀ(JJᵀ + λ²I)⁻¹ e, projected onto
    /// the joint limits every iteration. Joints resting on a limit that the
    /// step would push further are frozen for that iteration, and a stalled
    /// iterate is perturbed by a seeded kick so the result stays a pure
    /// function of the inputs.
    pub fn ik_dls(&self, target: &Pose, q0: &[f64], params: &IkParams) -> Result<IkSolution, KinError> {
        self.check_dim(q0)?;
        params.check()?;
        let mut q = q0.to_vec();
        self.clamp_to_limits(&mut q);
        let damping = Matrix6::identity() * (params.damping * params.damping);
        let mut last_residual = f64::INFINITY;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut window_start = f64::INFINITY;
        let mut kicks = 0;
        for iteration in 0..=params.max_iterations {
            let fk = self.fk(&q)?;
            let err = pose_error(target, &fk.ee);
            let pos = err.fixed_rows::<3>(0).norm();
            let rot = err.fixed_rows::<3>(3).norm();
            last_residual = pos;
            if pos < params.position_tolerance && rot < params.orientation_tolerance {
                return Ok(IkSolution { q, iterations: iteration, position_error: pos, orientation_error: rot });
            }
            if iteration == params.max_iterations {
                break;
            }
            if iteration % STALL_WINDOW == 0 {
                // No real progress over a window means the iterate sits on a
                // singular stationary point; nudge it off.
                if iteration > 0 && err.norm() > 0.95 * window_start {
                    let kick = (STALL_KICK * 2f64.powi(kicks)).min(STALL_KICK_MAX);
                    kicks += 1;
                    for x in q.iter_mut() {
                        *x += rng.gen_range(-kick..kick);
                    }
                    self.clamp_to_limits(&mut q);
                    window_start = f64::INFINITY;
                    continue;
                }
                window_start = err.norm();
            }
            let mut j = self.jacobian_from(&fk);
            // Joints pinned at a limit and pushed outward drop out of the solve.
            let dq = loop {
                let jjt = &j * j.transpose() + damping;
                let Some(c) = jjt.cholesky() else {
                    return Err(KinError::NoConvergence { iterations: iteration, residual: pos });
                };
                let dq = j.transpose() * c.solve(&err) * params.step_scale;
                let pinned: Vec<usize> = (0..self.dof())
                    .filter(|&i| {
                        let (lo, hi) = self.joints[i].limits;
                        j.column(i).amax() > 0.0 && ((q[i] <= lo && dq[i] < 0.0) || (q[i] >= hi && dq[i] > 0.0))
                    })
                    .collect();
                if pinned.is_empty() {
                    break dq;
                }
                for i in pinned {
                    j.column_mut(i).fill(0.0);
                }
            };
            for (x, d) in q.iter_mut().zip(dq.iter()) {
                *x += d;
            }
            self.clamp_to_limits(&mut q);
        }
        Err(KinError::NoConvergence { iterations: params.max_iterations, residual: last_residual })
    }
}

/// IK iterations per progress check. The joint kick (rad) on a stall doubles
/// with every stall up to the cap.
const STALL_WINDOW: usize = 50;
const STALL_KICK: f64 = 0.05;
const STALL_KICK_MAX: f64 = 0.8;

/// Stacked `[p_target − p; axis·angle(R_target · Rᵀ)]`.
pub fn pose_error(target: &Pose, current: &Pose) -> Vector6<f64> {
    let dp = target.translation - current.translation;
    let dr: UnitQuaternion<f64> = target.rotation * current.rotation.inverse();
    let w = dr.scaled_axis();
    Vector6::new(dp.x, dp.y, dp.z, w.x, w.y, w.z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkParams {
    pub damping: f64,
    pub max_iterations: usize,
    pub position_tolerance: f64,
    pub orientation_tolerance: f64,
    pub step_scale: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self { damping: 0.05, max_iterations: 200, position_tolerance: 1e-4, orientation_tolerance: 1e-3, step_scale: 0.5 }
    }
}

impl IkParams {
    fn check(&self) -> Result<(), KinError> {
        if !(self.damping > 0.0) || !(self.position_tolerance > 0.0) || !(self.orientation_tolerance > 0.0) {
            return Err(KinError::InvalidChain("IK damping and tolerances must be positive".into()));
        }
        if !(self.step_scale > 0.0 && self.step_scale <= 1.0) {
            return Err(KinError::InvalidChain("IK step_scale must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q: Vec<f64>,
    pub iterations: usize,
    pub position_error: f64,
    pub orientation_error: f64,
}
