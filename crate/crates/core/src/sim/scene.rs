//! Scene description: robot chain reference, objects, workspace, safety
//! zone, cameras and timing. Parsed from TOML (see `fixtures/scenes`).

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::env::EnvError;
use crate::kin::Capsule;
use crate::se3::{Pose, PoseRecord};

use super::render::CameraModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box { half_extents: [f64; 3] },
    Sphere { radius: f64 },
}

impl Shape {
    /// Twice the smallest half extent: the widest a gripper can close to
    /// while still holding the object.
    pub fn grasp_width(&self) -> f64 {
        match self {
            Shape::Box { half_extents: h } => 2.0 * h[0].min(h[1]).min(h[2]),
            Shape::Sphere { radius } => 2.0 * radius,
        }
    }

    pub fn half_height(&self) -> f64 {
        match self {
            Shape::Box { half_extents } => half_extents[2],
            Shape::Sphere { radius } => *radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectConfig {
    pub id: String,
    pub shape: Shape,
    #[serde(default)]
    pub pose: PoseRecord,
    #[serde(default = "grey")]
    pub color: [f64; 3],
    #[serde(default)]
    pub graspable: bool,
    #[serde(default = "yes")]
    pub collidable: bool,
}

fn grey() -> [f64; 3] {
    [0.5, 0.5, 0.5]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// Euclidean distance from `p` to the box, zero inside.
    pub fn outside_distance(&self, p: &Vector3<f64>) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let e = (self.min[i] - p[i]).max(p[i] - self.max[i]).max(0.0);
            d2 += e * e;
        }
        d2.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub yaw: [f64; 2],
    #[serde(default)]
    pub table_height: f64,
    /// Object whose pose is drawn from the workspace on every reset.
    pub sampled_object: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperConfig {
    pub max_width: f64,
    /// Finger speed in m/s.
    pub speed: f64,
    /// Hand hull in the end-effector frame.
    #[serde(default)]
    pub hand_capsule: Option<Capsule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspConfig {
    #[serde(default = "default_grasp_radius")]
    pub radius: f64,
    /// When set, grasps with the object center farther than this from the
    /// grasp point are refused.
    #[serde(default)]
    pub reject_offset: Option<f64>,
}

fn default_grasp_radius() -> f64 {
    0.03
}

impl Default for GraspConfig {
    fn default() -> Self {
        Self { radius: default_grasp_radius(), reject_offset: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Joint,
    Cartesian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Step returns once targets are reached or a callback stops it.
    Sync,
    /// Step runs a fixed number of micro-steps and returns the latest state.
    Async,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Horizontal field of view; used when `fx` is absent.
    #[serde(default)]
    pub fov_deg: Option<f64>,
    #[serde(default)]
    pub fx: Option<f64>,
    #[serde(default)]
    pub fy: Option<f64>,
    #[serde(default)]
    pub cx: Option<f64>,
    #[serde(default)]
    pub cy: Option<f64>,
    /// Either an explicit base_T_cam pose or an eye/target pair.
    #[serde(default)]
    pub pose: Option<PoseRecord>,
    #[serde(default)]
    pub eye: Option<[f64; 3]>,
    #[serde(default)]
    pub target: Option<[f64; 3]>,
}

impl CameraConfig {
    pub fn model(&self) -> Result<CameraModel, EnvError> {
        let err = |m: &str| EnvError::Config(format!("camera {}: {m}", self.name));
        let fx = match (self.fx, self.fov_deg) {
            (Some(fx), _) => fx,
            (None, Some(fov)) => 0.5 * self.width as f64 / (0.5 * fov.to_radians()).tan(),
            (None, None) => return Err(err("needs fx or fov_deg")),
        };
        let extrinsic = match (self.pose, self.eye, self.target) {
            (Some(p), _, _) => Pose::from(p),
            (None, Some(eye), Some(target)) => {
                CameraModel::look_at(Vector3::from(eye), Vector3::from(target), Vector3::z())
            }
            _ => return Err(err("needs pose or eye and target")),
        };
        let cam = CameraModel {
            name: self.name.clone(),
            fx,
            fy: self.fy.unwrap_or(fx),
            cx: self.cx.unwrap_or(0.5 * self.width as f64),
            cy: self.cy.unwrap_or(0.5 * self.height as f64),
            height: self.height,
            width: self.width,
            extrinsic,
        };
        cam.check().map_err(|m| err(&m))?;
        Ok(cam)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub name: String,
    /// Chain fixture name or path to a chain file.
    pub robot: String,
    #[serde(default = "default_control")]
    pub control: ControlMode,
    #[serde(default = "default_mode")]
    pub mode: StepMode,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_rate")]
    pub control_rate_hz: f64,
    #[serde(default = "default_max_micro")]
    pub max_micro_steps: usize,
    #[serde(default = "default_async_micro")]
    pub async_micro_steps: usize,
    #[serde(default = "default_max_episode")]
    pub max_episode_steps: u64,
    /// Interrupts a step at the first contact.
    #[serde(default)]
    pub interrupt_on_collision: bool,
    pub gripper: Option<GripperConfig>,
    #[serde(default)]
    pub grasp: GraspConfig,
    pub workspace: Option<Workspace>,
    #[serde(default)]
    pub safety_zone: Option<Aabb>,
    #[serde(default)]
    pub objects: Vec<ObjectConfig>,
    #[serde(default)]
    pub cameras: Vec<CameraConfig>,
}

fn default_control() -> ControlMode {
    ControlMode::Joint
}
fn default_mode() -> StepMode {
    StepMode::Sync
}
fn default_dt() -> f64 {
    1.0 / 300.0
}
fn default_rate() -> f64 {
    30.0
}
fn default_max_micro() -> usize {
    600
}
fn default_async_micro() -> usize {
    10
}
fn default_max_episode() -> u64 {
    200
}

const PICK_CUBOID: &str = include_str!("../../fixtures/scenes/pick-cuboid.toml");

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        let scene: SceneConfig = toml::from_str(text).map_err(|e| EnvError::Config(e.to_string()))?;
        scene.check()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| EnvError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The bundled pick-cuboid scene.
    pub fn pick_cuboid() -> Self {
        Self::from_toml(PICK_CUBOID).expect("bundled scene parses")
    }

    /// A bundled scene name or a path.
    pub fn resolve(reference: &str) -> Result<Self, EnvError> {
        match reference {
            "pick-cuboid" => Ok(Self::pick_cuboid()),
            path => Self::load(Path::new(path)),
        }
    }

    fn check(&self) -> Result<(), EnvError> {
        let err = |m: String| Err(EnvError::Config(m));
        if !(self.dt > 0.0) || !(self.control_rate_hz > 0.0) {
            return err("dt and control_rate_hz must be positive".into());
        }
        if self.max_micro_steps == 0 || self.async_micro_steps == 0 {
            return err("micro-step counts must be at least 1".into());
        }
        let mut seen = std::collections::HashSet::new();
        for o in &self.objects {
            if !seen.insert(o.id.as_str()) {
                return err(format!("duplicate object id {:?}", o.id));
            }
            let ok = match o.shape {
                Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
                Shape::Sphere { radius } => radius > 0.0,
            };
            if !ok {
                return err(format!("object {:?} has a degenerate shape", o.id));
            }
        }
        if let Some(ws) = &self.workspace {
            if !(ws.x[0] < ws.x[1] && ws.y[0] < ws.y[1] && ws.yaw[0] <= ws.yaw[1]) {
                return err("workspace ranges must be non-degenerate".into());
            }
            if let Some(id) = &ws.sampled_object {
                if !self.objects.iter().any(|o| &o.id == id) {
                    return err(format!("sampled object {id:?} is not in the scene"));
                }
            }
        }
        if let Some(g) = &self.gripper {
            if !(g.max_width > 0.0 && g.speed > 0.0) {
                return err("gripper max_width and speed must be positive".into());
            }
        }
        if let Some(z) = &self.safety_zone {
            if (0..3).any(|i| z.min[i] > z.max[i]) {
                return err("safety zone needs min <= max".into());
            }
        }
        for c in &self.cameras {
            c.model()?;
        }
        Ok(())
    }

    pub fn camera(&self, name: &str) -> Result<CameraModel, EnvError> {
        self.cameras
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| EnvError::CameraUnavailable(name.to_string()))?
            .model()
    }

    /// Control period in nanoseconds.
    pub fn period_ns(&self) -> u64 {
        (1e9 / self.control_rate_hz).round() as u64
    }
}
