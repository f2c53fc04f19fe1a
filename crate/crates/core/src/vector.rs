//! Episode rollouts and the synchronized parallel vector runner.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Barrier, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, WrapperChain};
use crate::policy::Agent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub steps: u64,
    #[serde(rename = "return")]
    pub total_reward: f64,
    pub success: bool,
    pub terminated: bool,
    pub truncated: bool,
}

/// Runs one episode from `reset(seed)` until termination, truncation or
/// `max_steps` actions (the last counts as truncation).
pub fn rollout(
    chain: &mut WrapperChain,
    agent: &mut dyn Agent,
    seed: u64,
    max_steps: Option<u64>,
) -> Result<EpisodeOutcome, EnvError> {
    let mut obs = chain.reset(seed)?;
    agent.reset(seed)?;
    let mut out =
        EpisodeOutcome { seed, steps: 0, total_reward: 0.0, success: false, terminated: false, truncated: false };
    loop {
        let r = chain.step(agent.act(&obs)?)?;
        out.steps += 1;
        out.total_reward += r.reward;
        out.success |= r.flag("success");
        out.terminated = r.terminated;
        out.truncated = r.truncated;
        if r.done() {
            return Ok(out);
        }
        if max_steps.is_some_and(|m| out.steps >= m) {
            out.truncated = true;
            return Ok(out);
        }
        obs = r.observation;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorStats {
    pub n_envs: usize,
    pub total_steps: u64,
    pub elapsed_s: f64,
    pub steps_per_sec: f64,
    /// Completed episodes per environment.
    pub episodes: Vec<u64>,
    pub successes: Vec<u64>,
    pub outcomes: Vec<Vec<EpisodeOutcome>>,
}

#[derive(Debug, Error)]
#[error("environment {env} failed: {source}")]
pub struct VectorError {
    pub env: usize,
    #[source]
    pub source: EnvError,
}

/// Seed of episode `episode` in environment `env` out of `n_envs`.
pub fn episode_seed(seed0: u64, episode: u64, env: usize, n_envs: usize) -> u64 {
    seed0.wrapping_add(episode * n_envs as u64 + env as u64)
}

/// Steps `n_envs` chains in lockstep: every environment finishes step k
/// before any begins k + 1. Episodes reset automatically with seeds from
/// [`episode_seed`]. Each environment runs `ceil(total_steps / n_envs)`
/// steps. Construction is excluded from the timing.
pub fn vector_run<F, A>(
    factory: F,
    n_envs: usize,
    agent_factory: A,
    total_steps: u64,
    seed0: u64,
) -> Result<VectorStats, VectorError>
where
    F: Fn(usize) -> Result<WrapperChain, EnvError> + Sync,
    A: Fn(usize) -> Result<Box<dyn Agent>, EnvError> + Sync,
{
    if n_envs == 0 {
        return Err(VectorError { env: 0, source: EnvError::Config("n_envs must be at least 1".into()) });
    }
    let per_env = total_steps.div_ceil(n_envs as u64);
    let start = Barrier::new(n_envs + 1);
    let step_barrier = Barrier::new(n_envs);
    // Step index of the earliest failure; setup failures count as step 0.
    let abort = AtomicU64::new(u64::MAX);
    let failure: Mutex<Option<VectorError>> = Mutex::new(None);
    let fail = |env: usize, step: u64, source: EnvError| {
        abort.fetch_min(step, Ordering::SeqCst);
        let mut f = failure.lock().unwrap();
        if f.as_ref().is_none_or(|prev| env < prev.env) {
            *f = Some(VectorError { env, source });
        }
    };

    let (elapsed, outcomes) = std::thread::scope(|s| {
        let workers: Vec<_> = (0..n_envs)
            .map(|i| {
                let (factory, agent_factory, start, step_barrier, abort, fail) =
                    (&factory, &agent_factory, &start, &step_barrier, &abort, &fail);
                s.spawn(move || {
                    let mut outcomes = Vec::new();
                    let setup = (|| {
                        let chain = factory(i)?;
                        let agent = agent_factory(i)?;
                        Ok::<_, EnvError>((chain, agent))
                    })();
                    let setup = setup.map_err(|e| fail(i, 0, e)).ok();
                    start.wait();
                    let Some((mut chain, mut agent)) = setup else {
                        return outcomes;
                    };
                    if abort.load(Ordering::SeqCst) != u64::MAX {
                        return outcomes;
                    }
                    let mut episode = 0;
                    let mut current: Option<(EpisodeOutcome, crate::space::Observation)> = None;
                    for k in 0..per_env {
                        let result = (|| {
                            let (mut out, obs) = match current.take() {
                                Some(c) => c,
                                None => {
                                    let seed = episode_seed(seed0, episode, i, n_envs);
                                    let obs = chain.reset(seed)?;
                                    agent.reset(seed)?;
                                    let out = EpisodeOutcome {
                                        seed,
                                        steps: 0,
                                        total_reward: 0.0,
                                        success: false,
                                        terminated: false,
                                        truncated: false,
                                    };
                                    (out, obs)
                                }
                            };
                            let r = chain.step(agent.act(&obs)?)?;
                            out.steps += 1;
                            out.total_reward += r.reward;
                            out.success |= r.flag("success");
                            out.terminated = r.terminated;
                            out.truncated = r.truncated;
                            Ok::<_, EnvError>((out, r.observation, r.terminated || r.truncated))
                        })();
                        match result {
                            Ok((out, _, true)) => {
                                outcomes.push(out);
                                episode += 1;
                            }
                            Ok((out, obs, false)) => current = Some((out, obs)),
                            Err(e) => fail(i, k, e),
                        }
                        step_barrier.wait();
                        if abort.load(Ordering::SeqCst) <= k {
                            break;
                        }
                    }
                    outcomes
                })
            })
            .collect();
        start.wait();
        let t0 = Instant::now();
        let outcomes: Vec<Vec<EpisodeOutcome>> = workers.into_iter().map(|w| w.join().expect("worker panicked")).collect();
        (t0.elapsed().as_secs_f64(), outcomes)
    });

    if let Some(err) = failure.into_inner().unwrap() {
        return Err(err);
    }
    let total = per_env * n_envs as u64;
    Ok(VectorStats {
        n_envs,
        total_steps: total,
        elapsed_s: elapsed,
        steps_per_sec: total as f64 / elapsed.max(1e-12),
        episodes: outcomes.iter().map(|o| o.len() as u64).collect(),
        successes: outcomes.iter().map(|o| o.iter().filter(|e| e.success).count() as u64).collect(),
        outcomes,
    })
}

/// Pick-cuboid in asynchronous mode with a `front` camera at `resolution`;
/// `[0, 0]` disables rendering.
pub fn bench_config(resolution: [usize; 2]) -> crate::config::ChainConfig {
    use crate::config::{ChainConfig, WrapperConfig};
    let mut cfg = ChainConfig::pick_cuboid();
    cfg.mode(crate::sim::StepMode::Async);
    if resolution[0] > 0 && resolution[1] > 0 {
        cfg = cfg.with(WrapperConfig::Camera { cameras: vec!["front".into()], resolution: Some(resolution), depth: true });
    }
    cfg
}

/// Random-policy throughput of `n_envs` bench chains.
pub fn bench_throughput(
    n_envs: usize,
    resolution: [usize; 2],
    total_steps: u64,
    seed0: u64,
) -> Result<VectorStats, VectorError> {
    use crate::policy::{ChunkedAgent, RandomPolicy};
    let cfg = bench_config(resolution);
    let model = cfg.model().map_err(|source| VectorError { env: 0, source })?;
    vector_run(
        |_| Ok(cfg.build_on(model.clone())?.chain),
        n_envs,
        |_| {
            let space = cfg.build_on(model.clone())?.chain.action_space().clone();
            Ok(Box::new(ChunkedAgent::per_step(RandomPolicy::new(space))) as Box<dyn Agent>)
        },
        total_steps,
        seed0,
    )
}
