//! `armstack` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod calib;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use armstack::config::ChainConfig;
use armstack::datagen::{self, EvalConfig, GenerateConfig, PolicySpec};
use armstack::rpc::{serve_policy, PolicyFactory};
use armstack::storage::{downsample, read_episode, Compression};
use armstack::teleop::{BridgeConfig, TeleopBridge};
use armstack::vector::bench_throughput;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "armstack", version, about = "Robot arm learning stack: simulate, record, evaluate, serve")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Bundled scene name or scene file.
    #[arg(long, global = true, default_value = "pick-cuboid", conflicts_with = "chain")]
    scene: String,
    /// Chain file: scene, wrapper list and seed.
    #[arg(long, global = true)]
    chain: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for machine-readable output.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scripted pick demonstrations, filtered by success.
    Generate {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: u64,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        parallel: u64,
        /// Also write failed episodes.
        #[arg(long)]
        keep_failures: bool,
        #[arg(long)]
        compress: bool,
        /// Reject grasps whose lateral offset exceeds this distance (m).
        #[arg(long)]
        reject_offset: Option<f64>,
    },
    /// Re-executes recorded episodes.
    Replay {
        #[arg(required = true)]
        episodes: Vec<PathBuf>,
        /// Shift the graspable objects by `dx,dy,dz` meters after reset.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        perturb: Option<Vec<f64>>,
        /// Downsample to this rate before replaying.
        #[arg(long)]
        downsample: Option<f64>,
    },
    /// Seeded rollouts of a policy.
    Evaluate {
        /// scripted, random, hold or a policy server endpoint.
        #[arg(long)]
        policy: String,
        #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
        rollouts: u64,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, default_value_t = 1)]
        horizon: usize,
        #[arg(long)]
        replan_every: Option<usize>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, default_value = "")]
        checkpoint: String,
    },
    /// Serves a built-in policy over the policy protocol.
    Serve {
        #[arg(long, default_value = "scripted")]
        policy: String,
        #[arg(long, default_value = "tcp://127.0.0.1:5555")]
        endpoint: String,
    },
    /// Vector-runner throughput per environment count.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        envs: Vec<usize>,
        /// HxW camera resolution; 0x0 disables rendering.
        #[arg(long, default_value = "64x64", value_parser = parse_resolution)]
        resolution: [usize; 2],
        #[arg(long, default_value_t = 2000)]
        steps: u64,
    },
    /// Camera poses in the base frame from a tag-pose file.
    Calibrate {
        #[arg(long)]
        tag_pose_file: PathBuf,
    },
    /// WebSocket teleoperation bridge.
    TeleopBridge {
        #[arg(long, default_value_t = 8765)]
        ws_port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory for recorded episodes.
        #[arg(long)]
        record: Option<PathBuf>,
        /// One step per input frame instead of the control rate.
        #[arg(long)]
        lockstep: bool,
        /// Camera streamed to the client.
        #[arg(long)]
        camera: Option<String>,
        /// Stop after this many steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
}

fn parse_resolution(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    if (h == 0) != (w == 0) {
        return Err("use 0x0 to disable rendering".into());
    }
    Ok([h, w])
}

fn chain_config(g: &Global) -> Result<ChainConfig> {
    let cfg = match &g.chain {
        Some(path) => ChainConfig::load(path)?,
        None => {
            let mut cfg = ChainConfig::pick_cuboid();
            cfg.set_scene(&g.scene);
            cfg
        }
    };
    cfg.scene().with_context(|| "loading scene")?;
    Ok(cfg)
}

fn seed(g: &Global, cfg: &ChainConfig) -> u64 {
    g.seed.unwrap_or(cfg.seed)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    datagen::write_report(value, &path)?;
    Ok(path)
}

fn builtin(spec: &str) -> Result<PolicySpec> {
    match spec.parse::<PolicySpec>()? {
        PolicySpec::Remote(e) => bail!("cannot serve remote policy {e}"),
        p => Ok(p),
    }
}

fn interrupted() -> Result<Arc<AtomicBool>> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)).context("installing signal handler")?;
    Ok(flag)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Generate { episodes, parallel, keep_failures, compress, reject_offset } => {
            let mut chain = chain_config(g)?;
            if reject_offset.is_some() {
                chain.reject_offset(reject_offset);
            }
            let mut cfg = GenerateConfig::new(chain.clone(), episodes, g.out.join("episodes"));
            cfg.seed0 = seed(g, &chain);
            cfg.parallelism = parallel as usize;
            cfg.keep_failures = keep_failures;
            cfg.compression = if compress { Compression::Zlib } else { Compression::None };
            let report = datagen::generate_scripted(&cfg)?;
            let path = write_json(&g.out, "generation_report.json", &report)?;
            println!(
                "generated {}/{} successful episodes ({:.1}%) in {:.2} s, {:.0} episodes/min",
                report.successful,
                report.attempted,
                100.0 * report.success_rate,
                report.wall_time_s,
                60.0 * report.attempted as f64 / report.wall_time_s.max(1e-9),
            );
            println!("report: {}", path.display());
        }
        Command::Replay { episodes, perturb, downsample: rate } => {
            let chain = chain_config(g)?;
            let offset = perturb.map(|v| [v[0], v[1], v[2]]);
            let mut reports = Vec::new();
            let mut failed = false;
            for path in &episodes {
                let result = (|| -> Result<datagen::ReplayReport> {
                    let mut ep = read_episode(path)?;
                    if let Some(hz) = rate {
                        ep = downsample(&ep, hz)?;
                    }
                    Ok(datagen::replay(&ep, &chain, offset)?)
                })();
                match result {
                    Ok(r) => {
                        println!(
                            "{}: {} steps, success {} (recorded {}){}",
                            path.display(),
                            r.steps,
                            r.success,
                            r.recorded_success,
                            if r.truncated { ", truncated" } else { "" }
                        );
                        reports.push(serde_json::json!({"file": path, "report": r}));
                    }
                    Err(e) => {
                        failed = true;
                        eprintln!("{}: {e:#}", path.display());
                        reports.push(serde_json::json!({"file": path, "error": format!("{e:#}")}));
                    }
                }
            }
            write_json(&g.out, "replay_report.json", &reports)?;
            if failed {
                bail!("some episodes could not be replayed");
            }
        }
        Command::Evaluate { policy, rollouts, max_steps, horizon, replan_every, parallel, checkpoint } => {
            let chain = chain_config(g)?;
            let mut cfg = EvalConfig::new(chain.clone(), policy.parse()?, rollouts);
            cfg.seed0 = seed(g, &chain);
            cfg.max_steps = max_steps;
            cfg.horizon = horizon.max(1);
            cfg.replan_every = replan_every.unwrap_or(cfg.horizon);
            cfg.parallelism = parallel;
            cfg.checkpoint = checkpoint;
            let report = datagen::evaluate(&cfg)?;
            let path = write_json(&g.out, "eval_report.json", &report)?;
            let errors = report.entries.iter().filter(|e| e.error.is_some()).count();
            println!(
                "{}: {}/{} successful ({:.1}%), {errors} rollout errors",
                report.policy,
                report.successes,
                report.rollouts,
                100.0 * report.success_rate
            );
            println!("report: {}", path.display());
        }
        Command::Serve { policy, endpoint } => {
            let spec = builtin(&policy)?;
            let chain = chain_config(g)?;
            let model = chain.model()?;
            let space = chain.build_on(model.clone())?.chain.action_space().clone();
            datagen::baseline_policy(&spec, &model, &space)?;
            let factory: PolicyFactory =
                Arc::new(move || datagen::baseline_policy(&spec, &model, &space).expect("checked at startup"));
            let stop = interrupted()?;
            let server = serve_policy(factory, &endpoint)?;
            println!("listening on {}", server.endpoint());
            while !stop.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(20));
            }
            server.shutdown();
            println!("server stopped");
        }
        Command::Bench { envs, resolution, steps } => {
            if envs.is_empty() || envs.contains(&0) {
                bail!("environment counts must be at least 1");
            }
            let seed0 = g.seed.unwrap_or(0);
            println!("resolution {}x{}, {} steps per row", resolution[0], resolution[1], steps);
            println!("{:>5} {:>8} {:>10} {:>12} {:>8}", "envs", "steps", "seconds", "steps/s", "speedup");
            let mut rows = Vec::new();
            let mut base = None;
            for n in envs {
                let s = bench_throughput(n, resolution, steps, seed0)?;
                let base_rate = *base.get_or_insert(s.steps_per_sec);
                println!(
                    "{:>5} {:>8} {:>10.3} {:>12.1} {:>8.2}",
                    n,
                    s.total_steps,
                    s.elapsed_s,
                    s.steps_per_sec,
                    s.steps_per_sec / base_rate
                );
                rows.push(serde_json::json!({
                    "envs": n,
                    "total_steps": s.total_steps,
                    "elapsed_s": s.elapsed_s,
                    "steps_per_sec": s.steps_per_sec,
                    "episodes": s.episodes.iter().sum::<u64>(),
                }));
            }
            let report = serde_json::json!({
                "resolution": resolution,
                "cores": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
                "rows": rows,
            });
            write_json(&g.out, "bench.json", &report)?;
        }
        Command::Calibrate { tag_pose_file } => {
            let text = std::fs::read_to_string(&tag_pose_file)
                .with_context(|| format!("reading {}", tag_pose_file.display()))?;
            let poses = calib::calibrate(&text).map_err(|e| anyhow::anyhow!("{}: {e}", tag_pose_file.display()))?;
            let mut out = serde_json::Map::new();
            for (cam, pose) in &poses {
                let a = pose.to_array();
                println!("{cam} base_T_cam {}", a.map(|x| format!("{x:.9}")).join(" "));
                out.insert(cam.clone(), serde_json::json!(a));
            }
            write_json(&g.out, "calibration.json", &out)?;
        }
        Command::TeleopBridge { ws_port, host, record, lockstep, camera, max_steps } => {
            let chain = chain_config(g)?;
            let mut cfg = BridgeConfig::new(chain.clone());
            cfg.bind = format!("{host}:{ws_port}");
            cfg.seed = seed(g, &chain);
            cfg.record_dir = record;
            cfg.lockstep = lockstep;
            cfg.camera = camera;
            cfg.max_steps = max_steps;
            let stop = interrupted()?;
            let bridge = TeleopBridge::start(cfg)?;
            println!("teleop bridge on {}", bridge.url());
            while !stop.load(Ordering::SeqCst) && !bridge.env_finished() {
                std::thread::sleep(Duration::from_millis(20));
            }
            let summary = bridge.shutdown();
            println!("{} steps, {} episodes recorded", summary.steps, summary.episodes.len());
            for p in &summary.episodes {
                println!("  {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new().filter_level(cli.global.log_level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
