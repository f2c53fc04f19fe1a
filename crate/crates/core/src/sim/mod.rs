//! Deterministic arm simulator: servo joints, attach-on-grasp objects,
//! primitive collision checks and a software renderer.

pub mod collision;
pub mod env;
pub mod model;
pub mod render;
pub mod scene;

pub use collision::{check_collision, Contact};
pub use env::SimEnv;
pub use model::{
    grasp_update, micro_step, sample_object_pose, step_until_converged, Control, SimModel, SimState, StepCallback,
    StepOutcome,
};
pub use render::{encode_png, render, CameraModel, RenderOutput};
pub use scene::{Aabb, ControlMode, SceneConfig, Shape, StepMode};
