use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn msid(args: &[&str], config: &Path, out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_msid"));
    cmd.args(args).arg(config);
    if let Some(out) = out {
        cmd.arg("--output-dir").arg(out);
    }
    cmd.output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn linear_smoke_identifies() {
    let dir = tempfile::tempdir().unwrap();
    let out = msid(&["identify"], &config("linear_smoke.json"), Some(dir.path()));
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("4 runs: 4 converged, 0 exploded"), "{}", text(&out.stdout));

    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("run,seed,theta_final_1,cost_final,converged,exploded"));
    for line in lines {
        let theta: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((theta - 0.5).abs() < 1e-3, "{line}");
    }
    for run in 0..4 {
        assert!(dir.path().join(format!("run_{run:03}_log.csv")).exists());
        let report = fs::read_to_string(dir.path().join(format!("run_{run:03}_stability.json"))).unwrap();
        assert!(report.contains("\"exploded\": false"));
    }
    assert!(dir.path().join("aggregate.csv").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = msid(&["identify"], &fixture("unknown_key.json"), Some(dir.path()));
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("learning_rate"), "{}", text(&out.stderr));
}

#[test]
fn missing_data_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = msid(&["identify"], &fixture("missing_data.json"), Some(dir.path()));
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("no_such_trajectory.csv"), "{}", text(&out.stderr));
}

#[test]
fn default_gradcheck_passes() {
    let out = msid(&["gradcheck"], &config("gradcheck.json"), None);
    assert!(out.status.success(), "{}{}", text(&out.stdout), text(&out.stderr));
    assert!(text(&out.stdout).contains("all checks passed"));
}

#[test]
fn faulty_jacobian_fails_gradcheck() {
    let out = msid(&["gradcheck"], &fixture("gradcheck_fault.json"), None);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("FAIL") && stdout.contains("jac_f_x"), "{stdout}");
}

#[test]
fn zero_horizon_gradcheck_passes() {
    let out = msid(&["gradcheck"], &fixture("gradcheck_zero_horizon.json"), None);
    assert!(out.status.success(), "{}{}", text(&out.stdout), text(&out.stderr));
}

#[test]
fn bench_requires_three_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let out = msid(&["bench"], &fixture("bench_one_repeat.json"), Some(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("at least 3"), "{}", text(&out.stderr));
}

#[test]
fn bench_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = msid(&["bench"], &fixture("bench_small.json"), Some(dir.path()));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,T,n_x,n_vartheta,median_seconds"));
    assert_eq!(lines.count(), 4);
    assert!(dir.path().join("bench_summary.txt").exists());
}

#[test]
fn generated_data_feeds_identification() {
    let dir = tempfile::tempdir().unwrap();
    let out = msid(&["gen-data"], &fixture("gen_linear.json"), Some(dir.path()));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let data = dir.path().join("run_001_data.csv");
    assert!(dir.path().join("run_000_data.csv").exists() && data.exists());

    let cfg = r#"{
  "model": { "name": "linear" },
  "data": { "path": "run_001_data.csv" },
  "optimizer": { "step_size_vartheta": 0.02, "step_size_x0": 0.02, "max_iters": 2000 },
  "runs": { "count": 1, "seed": 9, "theta_init": { "mean": [0.4], "std": [0.0] }, "x0": { "low": [1.0], "high": [1.0] } },
  "output_dir": "fitted"
}"#;
    let path = dir.path().join("fit.json");
    fs::write(&path, cfg).unwrap();
    let out = msid(&["identify"], &path, None);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("fitted/summary.csv")).unwrap();
    let theta: f64 = summary.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((theta - 0.6).abs() < 0.05, "{theta}");
}

#[test]
fn output_dir_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fs::read_to_string(config("linear_smoke.json")).unwrap().replace("../out/linear_smoke", "from_config");
    let path = dir.path().join("smoke.json");
    fs::write(&path, cfg).unwrap();
    let target = dir.path().join("override");
    let out = msid(&["identify"], &path, Some(&target));
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(target.join("summary.csv").exists());
    assert!(!dir.path().join("from_config").exists());
}
