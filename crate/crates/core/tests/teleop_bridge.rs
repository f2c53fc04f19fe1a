//! Headless WebSocket clients against the teleop bridge.

use std::path::PathBuf;

use armstack::config::ChainConfig;
use armstack::policy::{Agent, ChunkedAgent, ScriptedPick, ScriptedPickConfig};
use armstack::sim::{ControlMode, StepMode};
use armstack::storage::{read_episode, MemorySink};
use armstack::teleop::{BridgeConfig, ClientFrame, RecordCommand, ServerFrame, TeleopBridge, TeleopClient};
use armstack::wrappers::{RecorderConfig, RecorderWrapper};
use serde_json::Value;

fn transcript_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/teleop/transcript.jsonl")
}

/// The scripted session the transcript captures.
fn session_inputs() -> Vec<ClientFrame> {
    use armstack::teleop::InputFrame;
    let mut frames = vec![ClientFrame::Record { command: RecordCommand::Start }];
    let mut seq = 0;
    let mut push = |frames: &mut Vec<ClientFrame>, delta: [f64; 6], gripper: f64, n: usize| {
        for _ in 0..n {
            frames.push(ClientFrame::Input(InputFrame { seq, delta, gripper }));
            seq += 1;
        }
    };
    push(&mut frames, [0.01, 0.0, 0.0, 0.0, 0.0, 0.0], 0.0, 4);
    push(&mut frames, [0.0, 0.0, -0.01, 0.0, 0.0, 0.0], 0.0, 4);
    push(&mut frames, [0.0, 0.0, 0.0, 0.0, 0.0, 0.1], 0.0, 2);
    push(&mut frames, [0.0; 6], 1.0, 3);
    push(&mut frames, [0.0, 0.0, 0.01, 0.0, 0.0, 0.0], 1.0, 3);
    frames.push(ClientFrame::Record { command: RecordCommand::Stop });
    push(&mut frames, [0.0; 6], 1.0, 1);
    frames
}

fn run_session(record: Option<PathBuf>) -> (Vec<Value>, Vec<PathBuf>) {
    let mut cfg = BridgeConfig::pick_cuboid();
    cfg.lockstep = true;
    cfg.seed = 11;
    cfg.record_dir = record;
    let bridge = TeleopBridge::start(cfg).unwrap();
    let mut client = TeleopClient::connect(&bridge.url()).unwrap();
    let mut lines = vec![serde_json::json!({"dir": "out", "frame": ServerFrame::Hello(client.hello.clone())})];
    let first = client.recv().unwrap();
    lines.push(serde_json::json!({"dir": "out", "frame": first}));
    for frame in session_inputs() {
        client.send(&frame).unwrap();
        lines.push(serde_json::json!({"dir": "in", "frame": frame}));
        if matches!(frame, ClientFrame::Input(_)) {
            let reply = client.recv().unwrap();
            lines.push(serde_json::json!({"dir": "out", "frame": reply}));
        }
    }
    client.close();
    (lines, bridge.shutdown().episodes)
}

fn close(a: &Value, b: &Value, path: &str) -> Result<(), String> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            if (x - y).abs() <= 1e-9 * (1.0 + x.abs()) {
                Ok(())
            } else {
                Err(format!("{path}: {x} != {y}"))
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            x.iter().zip(y).enumerate().try_for_each(|(i, (p, q))| close(p, q, &format!("{path}[{i}]")))
        }
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x.iter().try_for_each(|(k, v)| {
            let w = y.get(k).ok_or_else(|| format!("{path}.{k} missing"))?;
            close(v, w, &format!("{path}.{k}"))
        }),
        _ if a == b => Ok(()),
        _ => Err(format!("{path}: {a} != {b}")),
    }
}

#[test]
fn golden_transcript_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (lines, _) = run_session(Some(dir.path().into()));
    let path = transcript_path();
    if std::env::var_os("ARMSTACK_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let text: String = lines.iter().map(|l| serde_json::to_string(l).unwrap() + "\n").collect();
        std::fs::write(&path, text).unwrap();
    }
    let golden: Vec<Value> = std::fs::read_to_string(&path)
        .expect("transcript fixture; regenerate with ARMSTACK_BLESS=1")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(golden.len(), lines.len());
    for (i, (g, l)) in golden.iter().zip(&lines).enumerate() {
        close(g, l, &format!("line {}", i + 1)).unwrap();
    }
}

#[test]
fn transcript_frames_follow_the_schema() {
    let text = std::fs::read_to_string(transcript_path()).unwrap();
    let mut last_step = None;
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let frame = v["frame"].to_string();
        match v["dir"].as_str().unwrap() {
            "in" => {
                serde_json::from_str::<ClientFrame>(&frame).unwrap();
            }
            "out" => {
                if let ServerFrame::State(s) = serde_json::from_str::<ServerFrame>(&frame).unwrap() {
                    assert!(last_step.is_none_or(|l| s.step > l));
                    last_step = Some(s.step);
                }
            }
            d => panic!("direction {d}"),
        }
    }
}

#[test]
fn session_recording_matches_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, episodes) = run_session(Some(dir.path().into()));
    assert_eq!(episodes.len(), 1);
    let ep = read_episode(&episodes[0]).unwrap();
    let inputs: Vec<_> = session_inputs()
        .into_iter()
        .filter_map(|f| match f {
            ClientFrame::Input(i) => Some(i),
            _ => None,
        })
        .collect();
    assert_eq!(ep.steps.len(), 16);
    for (rec, input) in ep.steps.iter().zip(&inputs) {
        assert_eq!(rec.action.vector("cartesian_delta").unwrap(), input.delta);
        assert_eq!(rec.action.scalar("gripper"), Some(input.gripper));
    }
}

/// An episode recorded directly from the chain is reproduced by a client
/// sending its actions to the bridge.
#[test]
fn websocket_replay_reproduces_an_episode() {
    let mut chain_cfg = ChainConfig::pick_cuboid();
    chain_cfg.control(ControlMode::Cartesian).mode(StepMode::Async);
    let model = chain_cfg.model().unwrap();
    let sink = MemorySink::default();
    let mut chain = chain_cfg.build_on(model.clone()).unwrap().chain;
    let (rec, handle) = RecorderWrapper::new(RecorderConfig::default(), Box::new(sink.clone()));
    chain = chain.with(Box::new(rec)).unwrap();
    let policy = ScriptedPick::new(model, chain.action_space().clone(), ScriptedPickConfig::default());
    let mut agent = ChunkedAgent::per_step(policy);
    let seed = 4;
    let mut obs = chain.reset(seed).unwrap();
    agent.reset(seed).unwrap();
    loop {
        let r = chain.step(agent.act(&obs).unwrap()).unwrap();
        obs = r.observation;
        if r.terminated || r.truncated {
            break;
        }
    }
    drop(chain);
    handle.flush();
    let original = sink.episodes.lock().unwrap()[0].clone();
    assert!(original.header.success);

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = BridgeConfig::new(ChainConfig::pick_cuboid());
    cfg.lockstep = true;
    cfg.seed = seed;
    cfg.record_dir = Some(dir.path().into());
    let bridge = TeleopBridge::start(cfg).unwrap();
    let mut client = TeleopClient::connect(&bridge.url()).unwrap();
    client.recv_state().unwrap();
    client.record(RecordCommand::Start).unwrap();
    let mut last = None;
    for s in &original.steps {
        let d = s.action.vector("cartesian_delta").unwrap();
        let delta = [d[0], d[1], d[2], d[3], d[4], d[5]];
        client.input(delta, s.action.scalar("gripper").unwrap()).unwrap();
        last = Some(client.recv_state().unwrap());
    }
    client.close();
    let episodes = bridge.shutdown().episodes;
    let last = last.unwrap();
    assert_eq!(last.success, original.header.success);
    assert_eq!(last.ee_pose, obs.channels.vector("ee_pose").unwrap());

    let replayed = read_episode(&episodes[0]).unwrap();
    assert_eq!(replayed.header.success, original.header.success);
    assert_eq!(replayed.steps.len(), original.steps.len());
    for (a, b) in replayed.steps.iter().zip(&original.steps) {
        assert_eq!(a.action, b.action);
        assert_eq!(a.observation, b.observation);
        assert_eq!(a.reward, b.reward);
    }
}
