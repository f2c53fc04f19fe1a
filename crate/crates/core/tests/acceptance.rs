//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use armstack::config::{ChainConfig, WrapperConfig};
use armstack::datagen::{evaluate, generate_scripted, replay, EvalConfig, GenerateConfig, PolicySpec};
use armstack::env::{wrap, EnvError, EnvSpaces, Environment, IdentityWrapper, StepResult, Wrapper, WrapperChain};
use armstack::kin::{pose_error, IkParams, KinematicChain};
use armstack::policy::{Agent, ChunkedAgent, FnPolicy, Policy, ScriptedPick, ScriptedPickConfig};
use armstack::rpc::{connect, serve_policy, DelayTransport, PolicyFactory, RemoteClient, Transport, DEFAULT_TIMEOUT};
use armstack::se3::{calibrate_camera, Pose};
use armstack::sim::scene::ObjectConfig;
use armstack::sim::{SceneConfig, SimEnv, StepMode};
use armstack::space::{Action, Channels, Leaf, Observation, SpaceDescriptor, Value};
use armstack::storage::{decode_episode, downsample, encode_episode, read_episode, Compression, EpisodeRecord, MemorySink};
use armstack::teleop::{BridgeConfig, ClientFrame, RecordCommand, ServerFrame, TeleopBridge, TeleopClient};
use armstack::vector::bench_throughput;
use armstack::wrappers::{RecorderConfig, RecorderWrapper};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value as Json;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// Stub environment: action `u` is applied verbatim, observation `x` echoes it.

struct Echo {
    spaces: EnvSpaces,
    step: u64,
    last: Vec<f64>,
    applied: Arc<Mutex<Vec<Vec<f64>>>>,
}

impl Echo {
    fn new() -> (Self, Arc<Mutex<Vec<Vec<f64>>>>) {
        let applied = Arc::new(Mutex::new(Vec::new()));
        let spaces = EnvSpaces {
            observation: SpaceDescriptor::new().with("x", Leaf::uniform_vector(2, -1e9, 1e9)),
            action: SpaceDescriptor::new().with("u", Leaf::uniform_vector(2, -1e9, 1e9)),
        };
        (Self { spaces, step: 0, last: vec![0.0; 2], applied: applied.clone() }, applied)
    }

    fn observe(&self) -> Observation {
        Observation::new(self.step, Channels::new().with("x", Value::Vector(self.last.clone())))
    }
}

impl Environment for Echo {
    fn spaces(&self) -> &EnvSpaces {
        &self.spaces
    }

    fn reset(&mut self, _seed: u64) -> Result<Observation, EnvError> {
        self.step = 0;
        self.last = vec![0.0; 2];
        self.applied.lock().unwrap().clear();
        Ok(self.observe())
    }

    fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        let u = action.channels.vector("u").ok_or_else(|| EnvError::mismatch("u", "missing"))?.to_vec();
        self.applied.lock().unwrap().push(u.clone());
        self.last = u;
        self.step += 1;
        Ok(StepResult { observation: self.observe(), reward: 0.0, terminated: false, truncated: false, info: Default::default() })
    }
}

fn vector2(name: &str, v: [f64; 2]) -> Channels {
    Channels::new().with(name, Value::Vector(v.to_vec()))
}

/// `v ↦ a·v + b` on both the action and the observation, logging each call.
struct Affine {
    name: String,
    a: f64,
    b: f64,
    log: Arc<Mutex<Vec<String>>>,
}

impl Affine {
    fn map(&self, channels: &mut Channels, key: &str) {
        if let Some(Value::Vector(v)) = channels.get_mut(key) {
            v.iter_mut().for_each(|x| *x = self.a * *x + self.b);
        }
    }
}

impl Wrapper for Affine {
    fn name(&self) -> &str {
        &self.name
    }

    fn action(&mut self, mut action: Action, _inner: &mut dyn Environment) -> Result<Action, EnvError> {
        self.log.lock().unwrap().push(format!("g{}", self.name));
        self.map(&mut action.channels, "u");
        Ok(action)
    }

    fn observation(&mut self, mut obs: Observation, _inner: &mut dyn Environment) -> Result<Observation, EnvError> {
        self.log.lock().unwrap().push(format!("f{}", self.name));
        self.map(&mut obs.channels, "x");
        Ok(obs)
    }
}

fn composition_order() -> Result<(), String> {
    let log = Arc::new(Mutex::new(Vec::new()));
    let params = [(2.0, 1.0), (-0.5, 3.0), (4.0, -2.0)];
    let wrappers: Vec<Box<dyn Wrapper>> = params
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| Box::new(Affine { name: (i + 1).to_string(), a, b, log: log.clone() }) as Box<dyn Wrapper>)
        .collect();
    let (echo, applied) = Echo::new();
    let mut chain = WrapperChain::build(Box::new(echo), wrappers).map_err(err)?;
    chain.reset(0).map_err(err)?;
    log.lock().unwrap().clear();
    let u = 0.7;
    let r = chain.step(Action::new(vector2("u", [u, -u]))).map_err(err)?;
    let calls = log.lock().unwrap().clone();
    ensure(calls == ["g3", "g2", "g1", "f1", "f2", "f3"], || format!("hook order {calls:?}"))?;

    let g = |x: f64| params.iter().rev().fold(x, |x, (a, b)| a * x + b);
    let f = |x: f64| params.iter().fold(x, |x, (a, b)| a * x + b);
    let inner = applied.lock().unwrap()[0].clone();
    ensure(inner == [g(u), g(-u)], || format!("inner action {inner:?}, expected {:?}", [g(u), g(-u)]))?;
    let x = r.observation.channels.vector("x").unwrap();
    ensure(x == [f(g(u)), f(g(-u))], || format!("outer observation {x:?}"))
}

fn identity_transparency() -> Result<(), String> {
    let scene = || {
        let mut s = SceneConfig::pick_cuboid();
        s.mode = StepMode::Async;
        s
    };
    let mut plain: Box<dyn Environment> = Box::new(SimEnv::new(scene()).map_err(err)?);
    let mut wrapped: Box<dyn Environment> = Box::new(SimEnv::new(scene()).map_err(err)?);
    for _ in 0..3 {
        wrapped = wrap(Box::new(IdentityWrapper), wrapped).map_err(err)?;
    }
    ensure(plain.spaces() == wrapped.spaces(), || "identity changed the spaces".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let space = plain.spaces().action.clone();
    for seed in 0..5 {
        ensure(plain.reset(seed).map_err(err)? == wrapped.reset(seed).map_err(err)?, || format!("reset {seed} differs"))?;
        for t in 0..40 {
            let a = Action::new(space.sample(&mut rng));
            let (p, w) = (plain.step(a.clone()).map_err(err)?, wrapped.step(a).map_err(err)?);
            ensure(p == w, || format!("seed {seed} step {t}: results differ"))?;
        }
    }
    Ok(())
}

fn fuzz_wrapper_config(rng: &mut ChaCha8Rng) -> Vec<WrapperConfig> {
    let mut pool = vec![
        WrapperConfig::Gripper,
        WrapperConfig::Camera { cameras: vec!["front".into()], resolution: Some([12, 16]), depth: rng.gen() },
        WrapperConfig::Success { object: "cuboid".into(), lift_threshold: 0.1 },
        WrapperConfig::Pbrs { object: "cuboid".into(), target_height: 0.15, gamma: 0.99, success_bonus: 1.0 },
        WrapperConfig::SafetyGate { tolerance: None, obstacles: Vec::new() },
        WrapperConfig::Recorder {
            sink: "mem://".into(),
            task: "fuzz".into(),
            success_only: rng.gen(),
            compression: Compression::None,
            auto_start: true,
        },
    ];
    pool.shuffle(rng);
    let n = rng.gen_range(0..=pool.len());
    pool.truncate(n);
    pool
}

fn space_soundness() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut steps = 0;
    for trial in 0..60 {
        let mut cfg = ChainConfig::new("pick-cuboid");
        cfg.wrappers = fuzz_wrapper_config(&mut rng);
        cfg.mode(StepMode::Async).max_episode_steps(15);
        if rng.gen() {
            cfg.control(armstack::sim::ControlMode::Cartesian);
        }
        let kinds: Vec<String> = cfg.wrappers.iter().map(|w| format!("{w:?}").split([' ', '{']).next().unwrap().to_string()).collect();
        let ctx = |m: String| format!("trial {trial} {kinds:?}: {m}");
        let mut chain = cfg.build().map_err(|e| ctx(e.to_string()))?.chain;
        let obs_space = chain.observation_space().clone();
        let act_space = chain.action_space().clone();
        let mut obs = chain.reset(rng.gen_range(0..1000)).map_err(|e| ctx(e.to_string()))?;
        for _ in 0..20 {
            obs_space.validate(&obs.channels).map_err(|e| ctx(format!("observation: {e}")))?;
            let a = Action::new(act_space.sample(&mut rng));
            let r = chain.step(a).map_err(|e| ctx(format!("sampled action rejected: {e}")))?;
            steps += 1;
            obs = if r.done() { chain.reset(rng.gen_range(0..1000)).map_err(|e| ctx(e.to_string()))? } else { r.observation };
        }
    }
    Ok(steps)
}

fn wrapper_algebra() -> Outcome {
    composition_order()?;
    identity_transparency()?;
    let steps = space_soundness()?;
    Ok(format!("order, identity and {steps} fuzzed steps over 60 random chains"))
}

fn random_q(rng: &mut ChaCha8Rng, chain: &KinematicChain) -> Vec<f64> {
    chain.lower_limits().iter().zip(chain.upper_limits()).map(|(l, u)| rng.gen_range(*l..u)).collect()
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let v = |rng: &mut ChaCha8Rng| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    Pose::from_rpy(rng.gen_range(-3.1..3.1), rng.gen_range(-1.5..1.5), rng.gen_range(-3.1..3.1), v(rng))
}

fn kinematics() -> Outcome {
    let chain = KinematicChain::fixture("fr3-like-7dof").map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    let mut worst_j: f64 = 0.0;
    for _ in 0..1000 {
        let q = random_q(&mut rng, &chain);
        let j = chain.jacobian(&q).map_err(err)?;
        for i in 0..chain.dof() {
            let (mut qp, mut qm) = (q.clone(), q.clone());
            qp[i] += h;
            qm[i] -= h;
            let plus = chain.ee_pose(&qp).map_err(err)?;
            let minus = chain.ee_pose(&qm).map_err(err)?;
            let fd = pose_error(&plus, &minus) / (2.0 * h);
            worst_j = worst_j.max((j.column(i) - fd).amax());
        }
    }
    ensure(worst_j <= 1e-5, || format!("Jacobian deviates from finite differences by {worst_j:e}"))?;

    let params = IkParams { damping: 0.01, max_iterations: 5000, position_tolerance: 1e-6, ..IkParams::default() };
    let mut worst_ik: f64 = 0.0;
    for trial in 0..100 {
        let q_true = random_q(&mut rng, &chain);
        let target = chain.ee_pose(&q_true).map_err(err)?;
        let mut q0: Vec<f64> = q_true.iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect();
        chain.clamp_to_limits(&mut q0);
        let sol = chain.ik_dls(&target, &q0, &params).map_err(|e| format!("IK target {trial}: {e}"))?;
        let reached = chain.ee_pose(&sol.q).map_err(err)?;
        let residual = (reached.translation - target.translation).norm();
        ensure(residual < 1e-6, || format!("IK target {trial}: residual {residual:e} m"))?;
        worst_ik = worst_ik.max(residual);
    }

    let mut worst_cal: f64 = 0.0;
    for _ in 0..1000 {
        let base_t_cam = random_pose(&mut rng);
        let base_t_tag = random_pose(&mut rng);
        let cam_t_tag = base_t_cam.inverse().compose(&base_t_tag);
        let got = calibrate_camera(&base_t_tag, &cam_t_tag);
        worst_cal = worst_cal.max((got.to_matrix() - base_t_cam.to_matrix()).amax());
    }
    ensure(worst_cal <= 1e-9, || format!("calibration round trip off by {worst_cal:e}"))?;
    Ok(format!("Jacobian {worst_j:.1e}, IK 100/100 worst {worst_ik:.1e} m, calibration {worst_cal:.1e}"))
}

fn listing(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(err)?
        .map(|e| {
            let p = e.map_err(err)?.path();
            Ok((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).map_err(err)?))
        })
        .collect::<Result<_, String>>()?;
    files.sort();
    Ok(files)
}

fn pick_cuboid_end_to_end() -> Outcome {
    let chain = ChainConfig::pick_cuboid();
    let scripted = evaluate(&EvalConfig::new(chain.clone(), PolicySpec::Scripted, 100)).map_err(err)?;
    ensure(scripted.successes == 100, || format!("scripted oracle {}/100", scripted.successes))?;
    let random = evaluate(&EvalConfig::new(chain.clone(), PolicySpec::Random, 100)).map_err(err)?;
    ensure(random.successes <= 2, || format!("random policy {}/100", random.successes))?;

    let root = tempfile::tempdir().map_err(err)?;
    let mut listings = Vec::new();
    for parallelism in [1, 8] {
        let mut cfg = GenerateConfig::new(chain.clone(), 100, root.path().join(format!("p{parallelism}")));
        cfg.parallelism = parallelism;
        let report = generate_scripted(&cfg).map_err(err)?;
        listings.push((report, listing(&cfg.out_dir)?));
    }
    let ((report, files), (_, other)) = (&listings[0], &listings[1]);
    ensure(files == other, || "parallelism 1 and 8 wrote different episode sets".into())?;
    ensure(files.len() as u64 == report.successful && !files.is_empty(), || format!("{} files", files.len()))?;
    for path in &report.output_paths {
        let ep = read_episode(path).map_err(err)?;
        let r = replay(&ep, &chain, None).map_err(err)?;
        ensure(r.success, || format!("{} does not replay to success", path.display()))?;
    }
    Ok(format!(
        "scripted {}/100, random {}/100, {} episodes identical across parallelism 1 and 8 and all replay",
        scripted.successes,
        random.successes,
        files.len()
    ))
}

fn recording() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let chain = ChainConfig::pick_cuboid();
    let mut cfg = GenerateConfig::new(chain.clone(), 10, dir.path());
    cfg.seed0 = 500;
    let report = generate_scripted(&cfg).map_err(err)?;
    ensure(!report.output_paths.is_empty(), || "no episodes recorded".into())?;
    let mut worst: f64 = 0.0;
    for path in &report.output_paths {
        let bytes = std::fs::read(path).map_err(err)?;
        let ep = decode_episode(&bytes).map_err(err)?;
        ensure(ep.header.control_rate_hz == 30.0, || format!("recorded at {} Hz", ep.header.control_rate_hz))?;
        ensure(encode_episode(&ep).map_err(err)? == bytes, || format!("{}: re-encoding changed bytes", path.display()))?;
        let mut zipped = ep.clone();
        zipped.header.compression = Compression::Zlib;
        let z = encode_episode(&zipped).map_err(err)?;
        ensure(decode_episode(&z).map_err(err)? == zipped, || "zlib round trip differs".into())?;

        let slow = downsample(&ep, 5.0).map_err(err)?;
        ensure(slow.steps.len() == ep.steps.len().div_ceil(6), || format!("{} steps kept of {}", slow.steps.len(), ep.steps.len()))?;
        for (k, s) in slow.steps.iter().enumerate() {
            ensure(s.observation == ep.steps[6 * k].observation, || format!("kept step {k} is not source step {}", 6 * k))?;
        }
        let full = replay(&ep, &chain, None).map_err(err)?;
        let r = replay(&slow, &chain, None).map_err(err)?;
        let d = (0..3).map(|i| (r.final_ee_pose[i] - full.final_ee_pose[i]).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(d);
    }
    ensure(worst <= 1e-3, || format!("downsampled replay ends {worst:e} m away"))?;
    Ok(format!("{} episodes bitwise, every 6th step kept, downsampled replay within {worst:.1e} m", report.output_paths.len()))
}

fn safety_gate() -> Outcome {
    let obstacle: ObjectConfig = toml::from_str(
        "id = \"post\"\nshape = { kind = \"sphere\", radius = 0.08 }\npose = { translation = [0.35, 0.25, 0.35] }",
    )
    .map_err(err)?;
    let mut scene = SceneConfig::pick_cuboid();
    scene.mode = StepMode::Async;
    scene.max_episode_steps = 250;
    scene.objects.push(obstacle);
    let sim = SimEnv::new(scene).map_err(err)?;
    let mut chain =
        WrapperChain::build(Box::new(sim), vec![Box::new(armstack::wrappers::SafetyGate::new())]).map_err(err)?;
    let space = chain.action_space().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut vetoes, mut seed) = (0u64, 0);
    chain.reset(seed).map_err(err)?;
    for t in 0..10_000 {
        let r = chain.step(Action::new(space.sample(&mut rng))).map_err(|e| format!("step {t}: {e}"))?;
        if let Some(c) = chain.sim().unwrap().check_collision() {
            return Err(format!("step {t}: contact {c:?} in the protected environment"));
        }
        vetoes += r.flag("vetoed") as u64;
        if r.done() {
            seed += 1;
            chain.reset(seed).map_err(err)?;
        }
    }
    ensure(vetoes > 0, || "no action was vetoed".into())?;
    Ok(format!("10000 fuzzed actions, 0 contacts, {vetoes} vetoes"))
}

/// Independent pick potential on a recorded observation.
fn phi(obs: &Channels, target_height: f64) -> f64 {
    let ee = obs.vector("ee_pose").unwrap();
    let obj = obs.dict("object_poses").unwrap().vector("cuboid").unwrap();
    let d = ((ee[0] - obj[0]).powi(2) + (ee[1] - obj[1]).powi(2) + (ee[2] - obj[2]).powi(2)).sqrt();
    -d - (target_height - obj[2]).abs() + obs.discrete("grasped").unwrap() as f64
}

fn pbrs() -> Outcome {
    let (gamma, target_height, bonus) = (0.99, 0.15, 0.5);
    let cfg = ChainConfig::pick_cuboid().with(WrapperConfig::Pbrs {
        object: "cuboid".into(),
        target_height,
        gamma,
        success_bonus: bonus,
    });
    let built = cfg.build().map_err(err)?;
    let sink = MemorySink::default();
    let (rec, handle) = RecorderWrapper::new(RecorderConfig::default(), Box::new(sink.clone()));
    let mut chain = built.chain.with(Box::new(rec)).map_err(err)?;
    let policy = ScriptedPick::new(built.model.clone(), chain.action_space().clone(), ScriptedPickConfig::default());
    let mut agent = ChunkedAgent::per_step(policy);
    let mut finals = Vec::new();
    for seed in 0..100 {
        let mut obs = chain.reset(seed).map_err(err)?;
        agent.reset(seed).map_err(err)?;
        loop {
            let r = chain.step(agent.act(&obs).map_err(err)?).map_err(err)?;
            let done = r.done();
            obs = r.observation;
            if done {
                break;
            }
        }
        finals.push(obs);
    }
    drop(chain);
    handle.flush();
    let episodes: Vec<EpisodeRecord> = sink.episodes.lock().unwrap().clone();
    ensure(episodes.len() == 100, || format!("{} episodes recorded", episodes.len()))?;
    let mut worst: f64 = 0.0;
    for (ep, last) in episodes.iter().zip(&finals) {
        let mut states: Vec<&Channels> = ep.steps.iter().map(|s| &s.observation).collect();
        states.push(&last.channels);
        let phis: Vec<f64> = states.iter().map(|o| phi(o, target_height)).collect();
        let t_len = ep.steps.len();
        let mut lhs = 0.0;
        for (t, s) in ep.steps.iter().enumerate() {
            let success = states[t + 1].discrete("success") == Some(1);
            let shaping = s.reward - if success { bonus } else { 0.0 };
            lhs += gamma.powi(t as i32) * shaping;
        }
        let rhs = gamma.powi(t_len as i32) * phis[t_len] - phis[0];
        worst = worst.max((lhs - rhs).abs());
    }
    ensure(worst <= 1e-9, || format!("telescoping identity off by {worst:e}"))?;
    Ok(format!("100 recorded episodes, worst deviation {worst:.1e}"))
}

type Trajectory = Vec<(Observation, f64, bool)>;

fn drive(chain: &mut WrapperChain, agent: &mut dyn Agent, seed: u64) -> Result<Trajectory, String> {
    let mut obs = chain.reset(seed).map_err(err)?;
    agent.reset(seed).map_err(err)?;
    let mut out = vec![(obs.clone(), 0.0, false)];
    loop {
        let r = chain.step(agent.act(&obs).map_err(err)?).map_err(err)?;
        out.push((r.observation.clone(), r.reward, r.done()));
        let done = r.done();
        obs = r.observation;
        if done {
            return Ok(out);
        }
    }
}

fn remote_trajectories(transport: Box<dyn Transport>, cfg: &ChainConfig, h: usize) -> Result<Vec<Trajectory>, String> {
    let mut chain = cfg.build().map_err(err)?.chain;
    let client = RemoteClient::handshake(transport, chain.observation_space(), chain.action_space(), h, h, DEFAULT_TIMEOUT)
        .map_err(err)?;
    let mut agent = ChunkedAgent::new(client, h, h);
    (0..3).map(|seed| drive(&mut chain, &mut agent, seed)).collect()
}

fn tagging_policy() -> PolicyFactory {
    Arc::new(|| {
        Box::new(FnPolicy::new("tag", |obs: &Observation, h: usize| {
            Ok((0..h).map(|i| Action::new(vector2("u", [obs.step as f64, i as f64]))).collect())
        })) as Box<dyn Policy>
    })
}

/// Steps the echo env `t_len` times; returns the applied actions and the
/// number of OBS requests.
fn aligned_run(transport: Box<dyn Transport>, h: usize, t_len: usize) -> Result<(Vec<Vec<f64>>, u64), String> {
    let (echo, applied) = Echo::new();
    let mut chain = WrapperChain::new(Box::new(echo));
    let client = RemoteClient::handshake(transport, chain.observation_space(), chain.action_space(), h, h, DEFAULT_TIMEOUT)
        .map_err(err)?;
    let mut agent = ChunkedAgent::new(client, h, h);
    let mut obs = chain.reset(0).map_err(err)?;
    agent.reset(0).map_err(err)?;
    for _ in 0..t_len {
        obs = chain.step(agent.act(&obs).map_err(err)?).map_err(err)?.observation;
    }
    let out = applied.lock().unwrap().clone();
    Ok((out, agent.policy().requests()))
}

fn rpc() -> Outcome {
    let cfg = ChainConfig::pick_cuboid();
    let model = cfg.model().map_err(err)?;
    let space = cfg.build().map_err(err)?.chain.action_space().clone();
    let factory: PolicyFactory = {
        let (model, space) = (model.clone(), space.clone());
        Arc::new(move || Box::new(ScriptedPick::new(model.clone(), space.clone(), ScriptedPickConfig::default())) as Box<dyn Policy>)
    };
    let tcp = serve_policy(factory.clone(), "tcp://127.0.0.1:0").map_err(err)?;
    let inproc = serve_policy(factory, "inproc://acceptance-scripted").map_err(err)?;
    let (tcp_ep, inproc_ep) = (tcp.endpoint().to_string(), inproc.endpoint().to_string());
    let h = 20;
    let over_tcp = remote_trajectories(connect(&tcp_ep).map_err(err)?, &cfg, h)?;
    let over_inproc = remote_trajectories(connect(&inproc_ep).map_err(err)?, &cfg, h)?;
    let delayed = Box::new(DelayTransport::new(connect(&tcp_ep).map_err(err)?, Duration::from_millis(3), 9));
    let over_delay = remote_trajectories(delayed, &cfg, h)?;
    ensure(over_tcp == over_inproc, || "tcp and inproc trajectories differ".into())?;
    ensure(over_tcp == over_delay, || "delayed trajectory differs".into())?;
    let mut local_chain = cfg.build().map_err(err)?.chain;
    let mut local_agent = ChunkedAgent::new(ScriptedPick::new(model, space, ScriptedPickConfig::default()), h, h);
    for (seed, remote) in over_tcp.iter().enumerate() {
        ensure(drive(&mut local_chain, &mut local_agent, seed as u64)? == *remote, || format!("seed {seed}: remote differs from local"))?;
    }
    tcp.shutdown();
    inproc.shutdown();

    let server = serve_policy(tagging_policy(), "inproc://acceptance-align").map_err(err)?;
    let endpoint = server.endpoint().to_string();
    let t_len = 47;
    for h in [1usize, 5, 20] {
        let plain = aligned_run(connect(&endpoint).map_err(err)?, h, t_len)?;
        let slow = Box::new(DelayTransport::new(connect(&endpoint).map_err(err)?, Duration::from_millis(2), h as u64));
        let delayed = aligned_run(slow, h, t_len)?;
        for (label, (applied, requests)) in [("plain", &plain), ("delayed", &delayed)] {
            ensure(*requests == t_len.div_ceil(h) as u64, || format!("H={h} {label}: {requests} requests"))?;
            for (t, u) in applied.iter().enumerate() {
                let k = (t / h * h) as f64;
                ensure(u[..] == [k, t as f64 - k], || format!("H={h} {label}: step {t} applied {u:?}"))?;
            }
        }
    }
    server.shutdown();
    Ok(format!("3 scripted episodes bitwise over tcp, inproc and delayed tcp; alignment holds for H in 1, 5, 20"))
}

fn throughput() -> Outcome {
    let steps = 900;
    let off = bench_throughput(1, [0, 0], steps, 0).map_err(err)?.steps_per_sec;
    let on = bench_throughput(1, [64, 64], steps, 0).map_err(err)?.steps_per_sec;
    ensure(off > on, || format!("rendering off {off:.0} steps/s is not faster than on {on:.0} steps/s"))?;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let scaling = if cores >= 4 {
        let one = bench_throughput(1, [64, 64], 2 * steps, 0).map_err(err)?.steps_per_sec;
        let eight = bench_throughput(8, [64, 64], 8 * steps, 0).map_err(err)?.steps_per_sec;
        ensure(eight >= 2.0 * one, || format!("8 envs {eight:.0} steps/s < 2x 1 env {one:.0} steps/s"))?;
        format!("8 envs {eight:.0} vs 1 env {one:.0} steps/s")
    } else {
        format!("8-vs-1 scaling UNVERIFIED: needs >= 4 cores, found {cores}")
    };
    Ok(format!("render off {off:.0} steps/s > 64x64 {on:.0} steps/s; {scaling}"))
}

fn headless() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/teleop/transcript.jsonl");
    let text = std::fs::read_to_string(&path).map_err(err)?;
    let lines: Vec<Json> = text.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(err)?;
    let record = tempfile::tempdir().map_err(err)?;
    let mut cfg = BridgeConfig::pick_cuboid();
    cfg.lockstep = true;
    cfg.seed = 11;
    cfg.record_dir = Some(record.path().into());
    let bridge = TeleopBridge::start(cfg).map_err(err)?;
    let mut client = TeleopClient::connect(&bridge.url()).map_err(err)?;
    let mut got = vec![serde_json::to_value(ServerFrame::Hello(client.hello.clone())).map_err(err)?];
    got.push(serde_json::to_value(client.recv().map_err(err)?).map_err(err)?);
    let (mut inputs, mut recorded_inputs, mut recording) = (0, 0, false);
    for line in lines.iter().filter(|l| l["dir"] == "in") {
        let frame: ClientFrame = serde_json::from_value(line["frame"].clone()).map_err(err)?;
        client.send(&frame).map_err(err)?;
        match frame {
            ClientFrame::Input(_) => {
                inputs += 1;
                recorded_inputs += recording as usize;
                got.push(serde_json::to_value(client.recv().map_err(err)?).map_err(err)?);
            }
            ClientFrame::Record { command } => recording = matches!(command, RecordCommand::Start),
        }
    }
    client.close();
    let episodes = bridge.shutdown().episodes;
    let expected: Vec<&Json> = lines.iter().filter(|l| l["dir"] == "out").map(|l| &l["frame"]).collect();
    ensure(expected.len() == got.len(), || format!("{} server frames, fixture has {}", got.len(), expected.len()))?;
    for (i, (e, g)) in expected.iter().zip(&got).enumerate() {
        close(e, g).map_err(|m| format!("server frame {i}: {m}"))?;
    }
    ensure(episodes.len() == 1, || format!("{} episodes recorded", episodes.len()))?;
    let ep = read_episode(&episodes[0]).map_err(err)?;
    ensure(ep.steps.len() == recorded_inputs, || format!("{} recorded steps for {recorded_inputs} inputs", ep.steps.len()))?;
    Ok(format!("{inputs} inputs reproduce the golden transcript; recorded episode has {} steps", ep.steps.len()))
}

fn close(a: &Json, b: &Json) -> Result<(), String> {
    match (a, b) {
        (Json::Number(x), Json::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            ensure((x - y).abs() <= 1e-9 * (1.0 + x.abs()), || format!("{x} != {y}"))
        }
        (Json::Array(x), Json::Array(y)) if x.len() == y.len() => x.iter().zip(y).try_for_each(|(p, q)| close(p, q)),
        (Json::Object(x), Json::Object(y)) if x.len() == y.len() => {
            x.iter().try_for_each(|(k, v)| close(v, y.get(k).ok_or_else(|| format!("{k} missing"))?).map_err(|m| format!("{k}: {m}")))
        }
        _ => ensure(a == b, || format!("{a} != {b}")),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("wrapper-algebra", wrapper_algebra),
        ("kinematics", kinematics),
        ("pick-cuboid", pick_cuboid_end_to_end),
        ("recording", recording),
        ("safety-gate", safety_gate),
        ("pbrs", pbrs),
        ("rpc", rpc),
        ("throughput", throughput),
        ("headless", headless),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name:<16} {detail} ({secs:.1} s)"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name:<16} {reason} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
