//! Rendered camera frames captured at the step boundary.

use crate::env::{EnvError, EnvSpaces, Environment, Wrapper};
use crate::sim::CameraModel;
use crate::space::{ElementKind, Leaf, Observation, Value};

const CALIBRATION_BOUND: f64 = 1e6;

/// For every camera `c` the observation gains `c_rgb` (u8 HxWx3),
/// optionally `c_depth` (f32 HxWx1, metres along the optical axis),
/// `c_intrinsics` (`[fx, fy, cx, cy]`) and `c_extrinsics` (base_T_cam as
/// `[x, y, z, qw, qx, qy, qz]`). All frames of one observation come from the
/// same simulator state.
pub struct CameraWrapper {
    names: Vec<String>,
    resolution: Option<(usize, usize)>,
    depth: bool,
    cameras: Vec<CameraModel>,
}

impl CameraWrapper {
    pub fn new(names: &[&str]) -> Self {
        Self { names: names.iter().map(|s| s.to_string()).collect(), resolution: None, depth: true, cameras: Vec::new() }
    }

    /// Renders at `height × width` instead of the configured resolution.
    pub fn with_resolution(mut self, height: usize, width: usize) -> Self {
        self.resolution = Some((height, width));
        self
    }

    pub fn with_depth(mut self, depth: bool) -> Self {
        self.depth = depth;
        self
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    fn capture(&self, mut obs: Observation, inner: &dyn Environment) -> Result<Observation, EnvError> {
        let sim = inner.sim().ok_or_else(|| EnvError::CameraUnavailable("no renderable scene below the camera wrapper".into()))?;
        for cam in &self.cameras {
            let frame = sim.render(cam);
            obs.channels.insert(&format!("{}_rgb", cam.name), Value::Image(frame.rgb));
            if self.depth {
                obs.channels.insert(&format!("{}_depth", cam.name), Value::Image(frame.depth));
            }
            obs.channels.insert(&format!("{}_intrinsics", cam.name), Value::Vector(cam.intrinsics().to_vec()));
            obs.channels.insert(&format!("{}_extrinsics", cam.name), Value::Vector(cam.extrinsic.to_array().to_vec()));
        }
        Ok(obs)
    }
}

impl Wrapper for CameraWrapper {
    fn name(&self) -> &str {
        "camera"
    }

    fn bind(&mut self, inner: &dyn Environment) -> Result<EnvSpaces, EnvError> {
        let sim = inner.sim().ok_or_else(|| EnvError::CameraUnavailable("no renderable scene below the camera wrapper".into()))?;
        self.cameras = self
            .names
            .iter()
            .map(|n| {
                let cam = sim.model().scene.camera(n)?;
                let cam = match self.resolution {
                    Some((h, w)) => cam.with_resolution(h, w),
                    None => cam,
                };
                cam.check().map_err(|e| EnvError::Config(format!("camera {n}: {e}")))?;
                Ok(cam)
            })
            .collect::<Result<_, EnvError>>()?;
        let mut spaces = inner.spaces().clone();
        for cam in &self.cameras {
            let obs = &mut spaces.observation;
            obs.insert(&format!("{}_rgb", cam.name), Leaf::image(cam.height, cam.width, 3, ElementKind::U8))?;
            if self.depth {
                obs.insert(&format!("{}_depth", cam.name), Leaf::image(cam.height, cam.width, 1, ElementKind::F32))?;
            }
            obs.insert(&format!("{}_intrinsics", cam.name), Leaf::uniform_vector(4, 0.0, CALIBRATION_BOUND))?;
            obs.insert(&format!("{}_extrinsics", cam.name), Leaf::uniform_vector(7, -CALIBRATION_BOUND, CALIBRATION_BOUND))?;
        }
        Ok(spaces)
    }

    fn on_reset(&mut self, _seed: u64, obs: Observation, inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        self.capture(obs, inner)
    }

    fn observation(&mut self, obs: Observation, inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        self.capture(obs, inner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::testing::RecordingEnv;
    use crate::env::WrapperChain;
    use crate::sim::{render, SceneConfig, SimEnv};
    use crate::space::Action;
    use rand::SeedableRng;

    fn chain(names: &[&str]) -> Result<WrapperChain, EnvError> {
        WrapperChain::build(
            Box::new(SimEnv::new(SceneConfig::pick_cuboid()).unwrap()),
            vec![Box::new(CameraWrapper::new(names).with_resolution(24, 32))],
        )
    }

    #[test]
    fn two_cameras_add_their_channels() {
        let c = chain(&["front", "side"]).unwrap();
        for n in ["front_rgb", "front_depth", "side_rgb", "side_depth", "front_intrinsics", "side_extrinsics"] {
            assert!(c.observation_space().contains(n), "{n}");
        }
    }

    #[test]
    fn frames_match_the_returned_state() {
        let mut c = chain(&["front", "side"]).unwrap();
        c.reset(3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let a = Action::new(c.action_space().sample(&mut rng));
            let r = c.step(a).unwrap();
            c.observation_space().validate(&r.observation.channels).unwrap();
            let sim = c.sim().unwrap();
            assert_eq!(r.observation.step, sim.control_step());
            for (cam, key) in [(0, "front_rgb"), (1, "side_rgb")] {
                let model = sim.model().cameras[cam].with_resolution(24, 32);
                let expect = render(sim.model(), &model, sim.state());
                assert_eq!(r.observation.channels.get(key), Some(&Value::Image(expect.rgb)));
            }
        }
    }

    #[test]
    fn unknown_camera_or_no_scene() {
        assert!(matches!(chain(&["ceiling"]), Err(EnvError::CameraUnavailable(_))));
        let (env, _) = RecordingEnv::new();
        let err = WrapperChain::build(Box::new(env), vec![Box::new(CameraWrapper::new(&["front"]))]).err().unwrap();
        assert!(matches!(err, EnvError::CameraUnavailable(_)));
    }
}
