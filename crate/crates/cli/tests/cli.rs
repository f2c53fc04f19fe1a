use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn armstack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_armstack")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_2() {
    for args in [
        &["generate", "--episodes", "0"][..],
        &["generate", "--episodes", "2", "--frobnicate"],
        &["evaluate"],
        &["bench", "--resolution", "64"],
        &["generate", "--episodes", "1", "--scene", "pick-cuboid", "--chain", "c.toml"],
    ] {
        let out = armstack(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", text(&out.stderr));
    }
    assert_eq!(armstack(&["--help"]).status.code(), Some(0));
}

#[test]
fn generate_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = armstack(&["generate", "--episodes", "4", "--parallel", "2", "--seed", "7", "--out", out_dir]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("4/4"));
    let report = read_json(&dir.path().join("generation_report.json"));
    let files: Vec<_> = std::fs::read_dir(dir.path().join("episodes")).unwrap().map(|e| e.unwrap().path()).collect();
    let kept = files.len() as f64;
    assert_eq!(report["success_rate"].as_f64().unwrap(), kept / report["attempted"].as_f64().unwrap());
    assert_eq!(report["output_paths"].as_array().unwrap().len(), files.len());
    assert!(dir.path().join("episodes/episode_7.rcse").exists());

    let mut args = vec!["replay", "--out", out_dir];
    let paths: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    args.extend(paths.iter().map(String::as_str));
    let out = armstack(&args);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let replays = read_json(&dir.path().join("replay_report.json"));
    assert!(replays.as_array().unwrap().iter().all(|r| r["report"]["success"] == Value::Bool(true)));

    let out = armstack(&["replay", "--downsample", "5", "--out", out_dir, &paths[0]]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));

    let out = armstack(&["replay", "--out", out_dir, "/nonexistent/episode.rcse"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_builtin_policies() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = armstack(&["evaluate", "--policy", "scripted", "--rollouts", "3", "--horizon", "20", "--out", out_dir]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report = read_json(&dir.path().join("eval_report.json"));
    assert_eq!(report["entries"].as_array().unwrap().len(), 3);
    assert_eq!(report["success_rate"].as_f64(), Some(1.0));
    assert_eq!(report["horizon"].as_u64(), Some(20));

    let out = armstack(&["evaluate", "--policy", "hold", "--rollouts", "2", "--max-steps", "5", "--out", out_dir]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(read_json(&dir.path().join("eval_report.json"))["successes"].as_u64(), Some(0));
}

#[test]
fn unreachable_endpoint_fails_with_connection_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = armstack(&["evaluate", "--policy", "tcp://127.0.0.1:1", "--rollouts", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).to_lowercase().contains("connection refused"), "{}", text(&out.stderr));
}

#[test]
fn serve_answers_evaluate_and_stops_on_interrupt() {
    let mut server = Command::new(env!("CARGO_BIN_EXE_armstack"))
        .args(["serve", "--policy", "scripted", "--endpoint", "tcp://127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(server.stdout.take().unwrap()).lines();
    let ready = lines.next().unwrap().unwrap();
    let endpoint = ready.strip_prefix("listening on ").expect(&ready).to_string();
    assert!(!endpoint.ends_with(":0"));

    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = armstack(&["evaluate", "--policy", &endpoint, "--rollouts", "2", "--horizon", "5", "--out", out_dir]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report = read_json(&dir.path().join("eval_report.json"));
    assert_eq!(report["successes"].as_u64(), Some(2));

    Command::new("kill").args(["-INT", &server.id().to_string()]).status().unwrap();
    let status = server.wait().unwrap();
    assert_eq!(status.code(), Some(0));
    assert_eq!(lines.next().unwrap().unwrap(), "server stopped");
}

#[test]
fn bench_prints_one_row_per_env_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = armstack(&[
        "bench", "--envs", "1,2,3", "--resolution", "16x16", "--steps", "30", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let rows: Vec<&str> = stdout.lines().skip(2).collect();
    assert_eq!(rows.len(), 3, "{stdout}");
    let report = read_json(&dir.path().join("bench.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn calibrate_reads_tag_pose_files() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("tags.txt");
    std::fs::write(&file, "front base_T_tag 0 0 0 1 0 0 0\nfront cam_T_tag 0 0 0 1 0 0 0\n").unwrap();
    let out = armstack(&["calibrate", "--tag-pose-file", file.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("front base_T_cam 0.000000000 0.000000000 0.000000000 1.000000000"));

    std::fs::write(&file, "front base_T_tag 0 0 0 1 0 0 0\nfront cam_T_tag 0 0 x 1 0 0 0\n").unwrap();
    let out = armstack(&["calibrate", "--tag-pose-file", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("line 2"), "{}", text(&out.stderr));
}

#[test]
fn teleop_bridge_runs_headless() {
    let dir = tempfile::tempdir().unwrap();
    let out = armstack(&[
        "teleop-bridge", "--ws-port", "0", "--max-steps", "6", "--record", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.starts_with("teleop bridge on ws://127.0.0.1:"), "{stdout}");
    assert!(stdout.contains("6 steps, 0 episodes recorded"), "{stdout}");
}
