//! The standard wrapper library.

pub mod camera;
pub mod gripper;
pub mod pbrs;
pub mod recorder;
pub mod safety;
pub mod stream;
pub mod success;

pub use camera::CameraWrapper;
pub use gripper::GripperWrapper;
pub use pbrs::{PbrsWrapper, PickPotential, Potential};
pub use recorder::{RecorderConfig, RecorderHandle, RecorderWrapper};
pub use safety::{validate_path, SafetyGate};
pub use stream::{StreamReceiver, StreamWrapper};
pub use success::{SuccessCriterion, SuccessWrapper};
