//! Exit codes and outputs of the `tdid` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn tdid(args: &[&str], env: &[(&str, &str)]) -> Outcome {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tdid"));
    cmd.args(args).env_remove("TDID_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Outcome {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run_cmd(cmd: &str, config: &Path, out: &Path) -> Outcome {
    tdid(&[cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], &[])
}

/// Scalar plant `ẋ = a·x(t) + b0·x(t − 0.5) + u` with identifier and PE sections.
fn scalar(a: f64, t_end: f64, extra: &str) -> String {
    format!(
        r#"
version = 1

[plant]
c = [1.0]
psi = "zero"
lipschitz = 1.0
initial_state = [0.3]

[[plant.slot]]
delay = 0.0
a = [[{a}]]
b = [1.0]

[[plant.slot]]
delay = 0.5
a = [[0.2]]

[identifier]
t0 = [1.0]
gamma = 5.0

[[identifier.injection]]
delay = 0.0
k = [2.0]

[[input.sines]]
amplitude = 1.0
omega = 1.3

[[input.sines]]
amplitude = 0.5
omega = 3.1

[sim]
h = 0.01
t_end = {t_end}
record_stride = 10

[lmi.search]
max_iters = 2000
{extra}
"#
    )
}

#[test]
fn zero_plant_gives_all_zero_trajectory() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "zero.toml",
        "version = 1\n[plant]\nc = [1.0, 0.0]\n[[plant.slot]]\ndelay = 0.0\n[sim]\nh = 0.01\nt_end = 1.0\n",
    );
    let r = run_cmd("simulate", &cfg, dir.path());
    assert_eq!(r.code, 0, "{}", r.stderr);
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with('t'));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 101);
    for row in rows {
        let vals: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!(vals.iter().all(|v| *v == 0.0), "{row}");
    }
}

#[test]
fn malformed_config_reports_line() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "bad.toml", "version = 1\n\n[plant\nc = [1.0]\n");
    let r = run_cmd("simulate", &cfg, dir.path());
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 3"), "{}", r.stderr);
}

#[test]
fn unknown_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "k.toml", &scalar(-2.0, 1.0, "[sim2]\nh = 1.0"));
    assert_eq!(run_cmd("simulate", &cfg, dir.path()).code, 2);
}

#[test]
fn missing_gain_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let body = scalar(-2.0, 1.0, "").replace(
        "gamma = 5.0",
        "\n[[identifier.gains]]\ndelay = 0.0\na = [[1.0]]\nd = [[1.0]]\ng = [[1.0]]\nb = 1.0",
    );
    let cfg = write_config(&dir, "gain.toml", &body);
    let r = run_cmd("identify", &cfg, dir.path());
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("missing gain"), "{}", r.stderr);
}

#[test]
fn lmi_check_exit_codes() {
    let dir = TempDir::new().unwrap();
    let good = write_config(&dir, "good.toml", &scalar(-3.0, 1.0, ""));
    let r = run_cmd("lmi-check", &good, dir.path());
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    assert!(r.stdout.contains("verdict=feasible"));
    assert!(dir.path().join("certificate.toml").exists());

    let bad = write_config(&dir, "bad.toml", &scalar(5.0, 1.0, ""));
    let r = run_cmd("lmi-check", &bad, dir.path());
    assert_eq!(r.code, 1, "{}", r.stdout);
    assert!(!r.stdout.contains("verdict=feasible"));
}

#[test]
fn excitation_window_longer_than_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "pe.toml", &scalar(-2.0, 5.0, "[pe]\nwindow = 50.0"));
    assert_eq!(run_cmd("pe-check", &cfg, dir.path()).code, 4);

    let cfg = write_config(&dir, "pe_ok.toml", &scalar(-2.0, 30.0, "[pe]\nwindow = 10.0"));
    let r = run_cmd("pe-check", &cfg, dir.path());
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.starts_with("alpha="));
}

#[test]
fn finite_escape_is_a_blow_up() {
    // ẋ = x², x(0) = 1 escapes at t = 1.
    let dir = TempDir::new().unwrap();
    let body = "version = 1\n[plant]\nc = [1.0]\npsi = \"square\"\ninitial_state = [1.0]\n\
                [[plant.slot]]\ndelay = 0.0\ng = [[1.0]]\n[sim]\nh = 0.001\nt_end = 2.0\n";
    let cfg = write_config(&dir, "escape.toml", body);
    let r = run_cmd("simulate", &cfg, dir.path());
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("non-finite"), "{}", r.stderr);
}

#[test]
fn invalid_thread_count() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "t.toml", &scalar(-2.0, 1.0, ""));
    let r = tdid(
        &["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()],
        &[("TDID_THREADS", "many")],
    );
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("TDID_THREADS"));
}

#[test]
fn bad_usage() {
    assert_eq!(tdid(&["frobnicate"], &[]).code, 2);
    assert_eq!(tdid(&["simulate"], &[]).code, 2);
}

#[test]
fn outputs_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "det.toml", &scalar(-3.0, 20.0, "[pe]\nwindow = 5.0"));
    let mut runs = Vec::new();
    for (k, threads) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        let r = tdid(
            &[
                "reproduce-example",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--seed",
                "7",
                "--plots",
            ],
            &[("TDID_THREADS", threads)],
        );
        assert_eq!(r.code, 0, "{}", r.stderr);
        runs.push(out);
    }
    let mut names: Vec<_> = fs::read_dir(&runs[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 9, "{names:?}");
    for name in names {
        let a = fs::read(runs[0].join(&name)).unwrap();
        let b = fs::read(runs[1].join(&name)).unwrap();
        assert!(a == b, "{name:?} differs between runs");
    }
}
