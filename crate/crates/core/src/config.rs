//! Declarative chain construction.
//!
//! A chain file is TOML with a seed, a base environment and an ordered
//! wrapper list, first entry innermost:
//!
//! ```toml
//! seed = 0
//!
//! [env]
//! kind = "sim"
//! scene = "pick-cuboid"     # bundled name or path, relative to the file
//! control = "joint"         # optional overrides of the scene file
//! mode = "sync"
//! max_episode_steps = 200
//! reject_offset = 0.005
//!
//! [[wrappers]]
//! kind = "gripper"
//!
//! [[wrappers]]
//! kind = "success"
//! object = "cuboid"
//! lift_threshold = 0.1
//! ```
//!
//! Wrapper kinds: `gripper`, `camera`, `success`, `pbrs`, `safety_gate`,
//! `recorder`, `stream`. See [`WrapperConfig`] for their parameters.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};

use crate::env::{EnvError, Wrapper, WrapperChain};
use crate::sim::scene::{Aabb, ObjectConfig};
use crate::sim::{ControlMode, SceneConfig, SimEnv, SimModel, StepMode};
use crate::storage::{open_sink, Compression};
use crate::wrappers::{
    CameraWrapper, GripperWrapper, PbrsWrapper, PickPotential, RecorderConfig, RecorderHandle, RecorderWrapper,
    SafetyGate, StreamWrapper, SuccessCriterion, SuccessWrapper,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    #[serde(default)]
    pub seed: u64,
    pub env: EnvConfig,
    #[serde(default)]
    pub wrappers: Vec<WrapperConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Sim {
        scene: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        control: Option<ControlMode>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mode: Option<StepMode>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_episode_steps: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reject_offset: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        safety_zone: Option<Aabb>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WrapperConfig {
    Gripper,
    Camera {
        cameras: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        resolution: Option<[usize; 2]>,
        #[serde(default = "yes")]
        depth: bool,
    },
    Success {
        #[serde(default = "cuboid")]
        object: String,
        #[serde(default = "lift_threshold")]
        lift_threshold: f64,
    },
    Pbrs {
        #[serde(default = "cuboid")]
        object: String,
        target_height: f64,
        #[serde(default = "gamma")]
        gamma: f64,
        #[serde(default)]
        success_bonus: f64,
    },
    SafetyGate {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tolerance: Option<f64>,
        /// Keep-out geometry seen only by the twin.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        obstacles: Vec<ObjectConfig>,
    },
    Recorder {
        /// `file://dir`, `mem://` or a bare directory path.
        sink: String,
        #[serde(default = "pick_cuboid_task")]
        task: String,
        #[serde(default)]
        success_only: bool,
        #[serde(default)]
        compression: Compression,
        #[serde(default = "yes")]
        auto_start: bool,
    },
    Stream {
        endpoint: String,
    },
}

fn yes() -> bool {
    true
}
fn cuboid() -> String {
    "cuboid".into()
}
fn pick_cuboid_task() -> String {
    "pick-cuboid".into()
}
fn lift_threshold() -> f64 {
    0.10
}
fn gamma() -> f64 {
    0.99
}

impl WrapperConfig {
    /// Recorder and stream wrappers only observe; they do not change what
    /// the chain computes.
    pub fn is_observer(&self) -> bool {
        matches!(self, WrapperConfig::Recorder { .. } | WrapperConfig::Stream { .. })
    }
}

pub struct BuiltChain {
    pub chain: WrapperChain,
    pub model: Arc<SimModel>,
    pub recorders: Vec<RecorderHandle>,
}

impl ChainConfig {
    pub fn new(scene: &str) -> Self {
        Self {
            seed: 0,
            env: EnvConfig::Sim {
                scene: scene.into(),
                control: None,
                mode: None,
                max_episode_steps: None,
                reject_offset: None,
                safety_zone: None,
            },
            wrappers: Vec::new(),
        }
    }

    /// Pick-cuboid with gripper and success wrappers.
    pub fn pick_cuboid() -> Self {
        Self::new("pick-cuboid").with(WrapperConfig::Gripper).with(WrapperConfig::Success {
            object: cuboid(),
            lift_threshold: lift_threshold(),
        })
    }

    pub fn with(mut self, wrapper: WrapperConfig) -> Self {
        self.wrappers.push(wrapper);
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        toml::from_str(text).map_err(|e| EnvError::Config(e.to_string()))
    }

    /// Loads a chain file; a relative scene path resolves against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| EnvError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let EnvConfig::Sim { scene, .. } = &mut cfg.env;
        if scene.ends_with(".toml") && Path::new(scene.as_str()).is_relative() {
            if let Some(dir) = path.parent() {
                *scene = dir.join(scene.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("chain config serializes")
    }

    pub fn set_scene(&mut self, scene: &str) -> &mut Self {
        let EnvConfig::Sim { scene: s, .. } = &mut self.env;
        *s = scene.into();
        self
    }

    pub fn control(&mut self, control: ControlMode) -> &mut Self {
        let EnvConfig::Sim { control: c, .. } = &mut self.env;
        *c = Some(control);
        self
    }

    pub fn mode(&mut self, mode: StepMode) -> &mut Self {
        let EnvConfig::Sim { mode: m, .. } = &mut self.env;
        *m = Some(mode);
        self
    }

    pub fn max_episode_steps(&mut self, steps: u64) -> &mut Self {
        let EnvConfig::Sim { max_episode_steps: m, .. } = &mut self.env;
        *m = Some(steps);
        self
    }

    pub fn reject_offset(&mut self, offset: Option<f64>) -> &mut Self {
        let EnvConfig::Sim { reject_offset: r, .. } = &mut self.env;
        *r = offset;
        self
    }

    /// The scene with this file's overrides applied.
    pub fn scene(&self) -> Result<SceneConfig, EnvError> {
        let EnvConfig::Sim { scene, control, mode, max_episode_steps, reject_offset, safety_zone } = &self.env;
        let mut s = SceneConfig::resolve(scene)?;
        if let Some(c) = control {
            s.control = *c;
        }
        if let Some(m) = mode {
            s.mode = *m;
        }
        if let Some(n) = max_episode_steps {
            s.max_episode_steps = *n;
        }
        if reject_offset.is_some() {
            s.grasp.reject_offset = *reject_offset;
        }
        if safety_zone.is_some() {
            s.safety_zone = *safety_zone;
        }
        Ok(s)
    }

    pub fn model(&self) -> Result<Arc<SimModel>, EnvError> {
        Ok(Arc::new(SimModel::new(self.scene()?)?))
    }

    /// Hex SHA-256 of the configuration without observer wrappers, so
    /// output locations do not change it.
    pub fn digest(&self) -> String {
        let mut core = self.clone();
        core.wrappers.retain(|w| !w.is_observer());
        let json = serde_json::to_string(&core).expect("chain config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build(&self) -> Result<BuiltChain, EnvError> {
        self.build_on(self.model()?)
    }

    /// Builds on an already constructed model of [`ChainConfig::scene`].
    pub fn build_on(&self, model: Arc<SimModel>) -> Result<BuiltChain, EnvError> {
        let mut chain = WrapperChain::new(Box::new(SimEnv::from_model(model.clone())));
        let mut recorders = Vec::new();
        for w in &self.wrappers {
            let wrapper: Box<dyn Wrapper> = match w {
                WrapperConfig::Gripper => Box::new(GripperWrapper::new()),
                WrapperConfig::Camera { cameras, resolution, depth } => {
                    let names: Vec<&str> = cameras.iter().map(String::as_str).collect();
                    let mut c = CameraWrapper::new(&names).with_depth(*depth);
                    if let Some([h, w]) = resolution {
                        c = c.with_resolution(*h, *w);
                    }
                    Box::new(c)
                }
                WrapperConfig::Success { object, lift_threshold } => {
                    Box::new(SuccessWrapper::new(SuccessCriterion::new(object, *lift_threshold)?))
                }
                WrapperConfig::Pbrs { object, target_height, gamma, success_bonus } => Box::new(PbrsWrapper::new(
                    Box::new(PickPotential::new(object, *target_height)),
                    *gamma,
                    *success_bonus,
                )?),
                WrapperConfig::SafetyGate { tolerance, obstacles } => {
                    let mut gate = SafetyGate::new();
                    if let Some(t) = tolerance {
                        gate = gate.with_tolerance(*t);
                    }
                    if !obstacles.is_empty() {
                        let mut scene = model.scene.clone();
                        scene.objects.extend(obstacles.iter().cloned());
                        gate = gate.with_twin_model(Arc::new(SimModel::new(scene)?));
                    }
                    Box::new(gate)
                }
                WrapperConfig::Recorder { sink, task, success_only, compression, auto_start } => {
                    let mut extra = BTreeMap::new();
                    extra.insert("wrappers".into(), Json::from(self.wrapper_kinds()));
                    let config = RecorderConfig {
                        task: task.clone(),
                        config_digest: self.digest(),
                        compression: *compression,
                        success_only: *success_only,
                        auto_start: *auto_start,
                        extra,
                        ..RecorderConfig::default()
                    };
                    let (rec, handle) = RecorderWrapper::new(config, open_sink(sink)?);
                    recorders.push(handle);
                    Box::new(rec)
                }
                WrapperConfig::Stream { endpoint } => Box::new(StreamWrapper::new(crate::rpc::connect(endpoint)?)),
            };
            chain = chain.with(wrapper)?;
        }
        Ok(BuiltChain { chain, model, recorders })
    }

    fn wrapper_kinds(&self) -> Vec<String> {
        self.wrappers
            .iter()
            .map(|w| {
                serde_json::to_value(w)
                    .ok()
                    .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(String::from))
                    .unwrap_or_default()
            })
            .collect()
    }
}
