//! Scripted demonstration generation, episode replay and policy evaluation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::config::{ChainConfig, WrapperConfig};
use crate::env::{EnvError, WrapperChain};
use crate::policy::{Agent, ChunkedAgent, HoldPolicy, Policy, RandomPolicy, ScriptedPick, ScriptedPickConfig};
use crate::rpc::{RemoteClient, DEFAULT_TIMEOUT};
use crate::sim::SimModel;
use crate::space::{Observation, SpaceDescriptor};
use crate::storage::{Compression, EpisodeRecord};
use crate::vector::rollout;

fn pool(parallelism: usize) -> Result<rayon::ThreadPool, EnvError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| EnvError::Config(format!("thread pool: {e}")))
}

#[derive(Debug, Clone)]
pub struct GenerateConfig {
    /// Chain without a recorder; one is appended per episode.
    pub chain: ChainConfig,
    pub episodes: u64,
    pub seed0: u64,
    pub parallelism: usize,
    pub out_dir: PathBuf,
    /// Also write episodes that did not succeed.
    pub keep_failures: bool,
    pub compression: Compression,
    pub policy: ScriptedPickConfig,
}

impl GenerateConfig {
    pub fn new(chain: ChainConfig, episodes: u64, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            chain,
            episodes,
            seed0: 0,
            parallelism: 1,
            out_dir: out_dir.into(),
            keep_failures: false,
            compression: Compression::None,
            policy: ScriptedPickConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub attempted: u64,
    pub successful: u64,
    pub success_rate: f64,
    pub wall_time_s: f64,
    pub output_paths: Vec<PathBuf>,
    pub successful_seeds: Vec<u64>,
    pub config_digest: String,
}

struct Generated {
    seed: u64,
    success: bool,
    path: Option<PathBuf>,
}

/// Episode `i` uses seed `seed0 + i` and the scripted pick oracle. Files are
/// keyed by seed, so the output does not depend on `parallelism`.
pub fn generate_scripted(cfg: &GenerateConfig) -> Result<GenerationReport, EnvError> {
    let started = Instant::now();
    let model = cfg.chain.model()?;
    let graspable = model.scene.objects.iter().filter(|o| o.graspable).count();
    if graspable != 1 {
        return Err(EnvError::Config(format!("scene needs exactly one graspable object, found {graspable}")));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| EnvError::Storage(e.into()))?;
    let chain_cfg = cfg.chain.clone().with(WrapperConfig::Recorder {
        sink: format!("file://{}", cfg.out_dir.display()),
        task: model.scene.name.clone(),
        success_only: !cfg.keep_failures,
        compression: cfg.compression,
        auto_start: true,
    });

    let run_one = |i: u64| -> Result<Generated, EnvError> {
        let seed = cfg.seed0 + i;
        let built = chain_cfg.build_on(model.clone())?;
        let mut chain = built.chain;
        let policy = ScriptedPick::new(model.clone(), chain.action_space().clone(), cfg.policy.clone());
        let mut agent = ChunkedAgent::per_step(policy);
        let outcome = rollout(&mut chain, &mut agent, seed, None)?;
        drop(chain);
        let handle = &built.recorders[0];
        handle.flush();
        if let Some(e) = handle.errors().into_iter().next() {
            return Err(EnvError::Config(format!("recording seed {seed}: {e}")));
        }
        let path = handle.written().into_iter().flatten().next();
        Ok(Generated { seed, success: outcome.success, path })
    };

    let results: Vec<Result<Generated, EnvError>> =
        pool(cfg.parallelism)?.install(|| {
            use rayon::prelude::*;
            (0..cfg.episodes).into_par_iter().map(run_one).collect()
        });
    let mut done = Vec::with_capacity(results.len());
    for r in results {
        done.push(r?);
    }
    let successful: Vec<u64> = done.iter().filter(|g| g.success).map(|g| g.seed).collect();
    let attempted = cfg.episodes;
    Ok(GenerationReport {
        attempted,
        successful: successful.len() as u64,
        success_rate: if attempted == 0 { 0.0 } else { successful.len() as f64 / attempted as f64 },
        wall_time_s: started.elapsed().as_secs_f64(),
        output_paths: done.into_iter().filter_map(|g| g.path).collect(),
        successful_seeds: successful,
        config_digest: cfg.chain.digest(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub seed: u64,
    pub recorded_steps: u64,
    pub steps: u64,
    pub success: bool,
    pub recorded_success: bool,
    pub terminated: bool,
    /// The env truncated, or the actions ran out before the episode ended.
    pub truncated: bool,
    /// Whether every recorded observation was reproduced; `None` when the
    /// observation schemas differ.
    pub observations_match: Option<bool>,
    pub final_ee_pose: Vec<f64>,
    pub object_offset: Option<[f64; 3]>,
}

/// Re-executes recorded actions from the recorded seed. `object_offset`
/// shifts every graspable object after reset.
pub fn replay(
    record: &EpisodeRecord,
    chain_cfg: &ChainConfig,
    object_offset: Option<[f64; 3]>,
) -> Result<ReplayReport, EnvError> {
    let mut chain = chain_cfg.build()?.chain;
    replay_on(&mut chain, record, object_offset)
}

pub fn replay_on(
    chain: &mut WrapperChain,
    record: &EpisodeRecord,
    object_offset: Option<[f64; 3]>,
) -> Result<ReplayReport, EnvError> {
    let header = &record.header;
    if header.action_space.digest() != chain.action_space().digest() {
        return Err(EnvError::mismatch("action", "episode action schema differs from the chain"));
    }
    let same_obs = header.observation_space.digest() == chain.observation_space().digest();
    let mut obs = chain.reset(header.seed)?;
    if let Some(d) = object_offset {
        let sim = chain.sim_mut().ok_or_else(|| EnvError::Config("object offset needs a simulator".into()))?;
        let mut state = sim.state().clone();
        for o in state.objects.iter_mut().filter(|o| o.graspable) {
            o.pose.translation += Vector3::from(d);
        }
        sim.set_state(state);
        obs = sim.observe();
    }
    let mut report = ReplayReport {
        seed: header.seed,
        recorded_steps: record.steps.len() as u64,
        steps: 0,
        success: false,
        recorded_success: header.success,
        terminated: false,
        truncated: false,
        observations_match: same_obs.then_some(true),
        final_ee_pose: ee_pose(&obs),
        object_offset,
    };
    let mut done = false;
    for s in &record.steps {
        if same_obs && object_offset.is_none() && s.observation != obs.channels {
            report.observations_match = Some(false);
        }
        let r = chain.step(crate::space::Action::new(s.action.clone()))?;
        report.steps += 1;
        report.success |= r.flag("success");
        report.terminated = r.terminated;
        report.truncated = r.truncated;
        report.final_ee_pose = ee_pose(&r.observation);
        obs = r.observation;
        if r.terminated || r.truncated {
            done = true;
            break;
        }
    }
    if object_offset.is_some() {
        report.observations_match = None;
    }
    if !done {
        report.truncated = true;
    }
    Ok(report)
}

fn ee_pose(obs: &Observation) -> Vec<f64> {
    obs.channels.vector("ee_pose").map(<[f64]>::to_vec).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PolicySpec {
    Scripted,
    Random,
    Hold,
    /// `tcp://host:port` or `inproc://name`.
    Remote(String),
}

impl FromStr for PolicySpec {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s {
            "scripted" | "scripted_pick" => Ok(Self::Scripted),
            "random" => Ok(Self::Random),
            "hold" => Ok(Self::Hold),
            e if e.starts_with("tcp://") || e.starts_with("inproc://") => Ok(Self::Remote(e.into())),
            other => Err(EnvError::Config(format!("unknown policy {other:?}"))),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Scripted => f.write_str("scripted"),
            Self::Random => f.write_str("random"),
            Self::Hold => f.write_str("hold"),
            Self::Remote(e) => f.write_str(e),
        }
    }
}

impl From<PolicySpec> for String {
    fn from(p: PolicySpec) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for PolicySpec {
    type Error = EnvError;

    fn try_from(s: String) -> Result<Self, EnvError> {
        s.parse()
    }
}

/// A built-in policy for `model` emitting `action_space`.
pub fn baseline_policy(
    spec: &PolicySpec,
    model: &Arc<SimModel>,
    action_space: &SpaceDescriptor,
) -> Result<Box<dyn Policy>, EnvError> {
    Ok(match spec {
        PolicySpec::Scripted => {
            Box::new(ScriptedPick::new(model.clone(), action_space.clone(), ScriptedPickConfig::default()))
        }
        PolicySpec::Random => Box::new(RandomPolicy::new(action_space.clone())),
        PolicySpec::Hold => Box::new(HoldPolicy::new(action_space.clone(), model.gripper().map(|g| g.max_width))),
        PolicySpec::Remote(e) => return Err(EnvError::Config(format!("{e} is not a built-in policy"))),
    })
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub chain: ChainConfig,
    pub policy: PolicySpec,
    pub rollouts: u64,
    pub seed0: u64,
    pub max_steps: Option<u64>,
    pub horizon: usize,
    pub replan_every: usize,
    pub parallelism: usize,
    pub checkpoint: String,
    pub timeout: Duration,
}

impl EvalConfig {
    pub fn new(chain: ChainConfig, policy: PolicySpec, rollouts: u64) -> Self {
        Self {
            chain,
            policy,
            rollouts,
            seed0: 0,
            max_steps: None,
            horizon: 1,
            replan_every: 1,
            parallelism: 1,
            checkpoint: String::new(),
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutEntry {
    pub seed: u64,
    pub steps: u64,
    pub success: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub checkpoint: String,
    pub rollouts: u64,
    pub successes: u64,
    pub success_rate: f64,
    pub horizon: usize,
    pub entries: Vec<RolloutEntry>,
}

fn make_agent(cfg: &EvalConfig, model: &Arc<SimModel>, chain: &WrapperChain) -> Result<Box<dyn Agent>, EnvError> {
    let policy: Box<dyn Policy> = match &cfg.policy {
        PolicySpec::Remote(endpoint) => Box::new(RemoteClient::connect(
            endpoint,
            chain.observation_space(),
            chain.action_space(),
            cfg.horizon,
            cfg.replan_every,
            cfg.timeout,
        )?),
        spec => baseline_policy(spec, model, chain.action_space())?,
    };
    Ok(Box::new(ChunkedAgent::new(policy, cfg.horizon, cfg.replan_every)))
}

/// Rollout `i` uses seed `seed0 + i`. Errors inside a rollout count as a
/// failure with the reason recorded; failing to reach the policy at all is
/// an error.
pub fn evaluate(cfg: &EvalConfig) -> Result<EvalReport, EnvError> {
    let model = cfg.chain.model()?;
    {
        let probe = cfg.chain.build_on(model.clone())?.chain;
        make_agent(cfg, &model, &probe)?;
    }
    let run_one = |i: u64| -> RolloutEntry {
        let seed = cfg.seed0 + i;
        let result = (|| {
            let mut chain = cfg.chain.build_on(model.clone())?.chain;
            let mut agent = make_agent(cfg, &model, &chain)?;
            rollout(&mut chain, agent.as_mut(), seed, cfg.max_steps)
        })();
        match result {
            Ok(o) => RolloutEntry { seed, steps: o.steps, success: o.success, error: None },
            Err(e) => RolloutEntry { seed, steps: 0, success: false, error: Some(e.to_string()) },
        }
    };
    let entries: Vec<RolloutEntry> = pool(cfg.parallelism)?.install(|| {
        use rayon::prelude::*;
        (0..cfg.rollouts).into_par_iter().map(run_one).collect()
    });
    let successes = entries.iter().filter(|e| e.success).count() as u64;
    Ok(EvalReport {
        policy: cfg.policy.to_string(),
        checkpoint: cfg.checkpoint.clone(),
        rollouts: cfg.rollouts,
        successes,
        success_rate: if cfg.rollouts == 0 { 0.0 } else { successes as f64 / cfg.rollouts as f64 },
        horizon: cfg.horizon,
        entries,
    })
}

/// Writes a report as pretty JSON.
pub fn write_report<T: Serialize>(report: &T, path: &Path) -> Result<(), EnvError> {
    let text = serde_json::to_string_pretty(report).map_err(|e| EnvError::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| EnvError::Storage(e.into()))
}
