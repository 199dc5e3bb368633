use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn phasectl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phasectl"))
        .args(args)
        .env("PHASECTL_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        "n = 4\nhorizon = 5\njacobians = \"analytic\"\nsysid_mode = \"analytic-oracle\"\nnoise_levels = [0.0, 0.5]\nrollouts = 3\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn design_then_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("design");
    let o = phasectl(&["design", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("decision variables: 160"));
    for f in ["policy.ppol", "model.ltvm", "convergence.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let policy = out.join("policy.ppol");
    for strategy in ["open-loop", "closed-loop", "mpc"] {
        let o = phasectl(&[
            "rollout", "--config", &cfg, "--policy", policy.to_str().unwrap(), "--strategy", strategy, "--noise", "0.2",
            "--seed", "3",
        ]);
        assert!(o.status.success(), "{strategy}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("terminal MSE"));
    }
}

#[test]
fn baseline_rollout_needs_no_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = phasectl(&["rollout", "--config", &cfg, "--strategy", "baseline"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("terminal MSE"));
}

#[test]
fn simulate_writes_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sim");
    let o = phasectl(&[
        "simulate", "--config", &cfg, "--steps", "25", "--stride", "10", "--control", "baseline", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["step_000000.pfld", "step_000010.pfld", "step_000020.pfld", "step_000025.pfld"]);
}

#[test]
fn sweep_and_replay_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let o = phasectl(&["sweep", "--config", &cfg, "--strategies", "open-loop,closed-loop,baseline", "--raw", "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let b = dir.path().join("b");
    let o = phasectl(&["--threads", "1", "replay", "--manifest", a.join("manifest.json").to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["sweep.csv", "raw_costs.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
}

#[test]
fn unknown_strategy_is_usage_error() {
    let o = phasectl(&["sweep", "--strategies", "telepathy"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_goal_file_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = phasectl(&["design", "--goal", "/nonexistent/goal.csv", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("goal file"));
}

#[test]
fn bad_config_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "n = 4\nhorizn = 5\n").unwrap();
    let o = phasectl(&["design", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn unstable_explicit_dt_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dt.toml");
    fs::write(&path, "n = 4\ndt = 10.0\n").unwrap();
    let out = dir.path().join("o");
    let o = phasectl(&["simulate", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
