use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Stdio};

use dmpd_core::scenario::ScenarioConfig;

fn dmpd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dmpd"))
}

/// Short, cheap trials: a few seconds of simulated time with small sample counts.
fn quick_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ScenarioConfig::default();
    cfg.duration_cap = 1.0;
    cfg.planner.mppi.n_s = 16;
    cfg.planner.diffusion.n_s = 8;
    cfg.filter.n_particles = 50;
    let path = dir.join("quick.toml");
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    path
}

#[test]
fn config_prints_a_loadable_default() {
    let out = dmpd().arg("config").output().unwrap();
    assert!(out.status.success());
    let cfg = ScenarioConfig::from_toml_str(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ScenarioConfig::default());
}

#[test]
fn run_writes_trace_and_timeseries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = dmpd()
        .args(["run", "--controller", "emppi", "--seed", "4", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(result["seed"], 4);
    assert_eq!(result["outcome"], "timeout");

    let trace = std::fs::read_to_string(out_dir.join("trace_emppi_0004.jsonl")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert!(lines[0].contains("\"kind\":\"header\""));
    assert!(lines.last().unwrap().contains("\"kind\":\"result\""));
    let csv = std::fs::read_to_string(out_dir.join("trace_emppi_0004.csv")).unwrap();
    // header plus one row per step record
    assert_eq!(csv.lines().count(), lines.len() - 1);
}

#[test]
fn batch_writes_one_metrics_row_per_controller() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let out_dir = dir.path().join("batch");
    let out = dmpd()
        .args(["batch", "--controllers", "emppi,ce", "--trials", "2", "--seed", "10", "--no-traces", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().nth(1).unwrap().starts_with("EMPPI"));
    let trials = std::fs::read_to_string(out_dir.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 5);
    assert!(!out_dir.join("trace_emppi_0010.jsonl").exists());
}

#[test]
fn rejects_unknown_controller() {
    let out = dmpd().args(["run", "--controller", "pid"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown controller"));
}

#[test]
fn serve_announces_its_address() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let mut child = dmpd()
        .args(["serve", "--port", "0", "--realtime-factor", "4", "--config"])
        .arg(&cfg)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(line.starts_with("listening on ws://127.0.0.1:"), "{line}");
    assert!(line.trim_end().ends_with("/ws"));
}
