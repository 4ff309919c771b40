mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::fixtures_dir;

fn evolver() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evolver"));
    cmd.env_remove("EVOLVER_API_KEY").env_remove("EVOLVER_ENDPOINT").env("RUST_LOG", "warn");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn evolver")
}

fn fixture(name: &str) -> String {
    fixtures_dir().join(name).canonicalize().unwrap().display().to_string()
}

/// Writes a config into `dir` that reads the fixture data; `scripts` are
/// mock files consulted before the fixture script.
fn write_config(dir: &Path, scripts: &[(&str, &str)], extra: &str) -> PathBuf {
    let mut names = Vec::new();
    for (name, body) in scripts {
        std::fs::write(dir.join(name), body).unwrap();
        names.push(format!("{name:?}"));
    }
    names.push(format!("{:?}", fixture("mock_pipeline.json")));
    let text = format!(
        r#"rng_seed = 7

[paths]
seed_dataset = {seed:?}
dev_dataset = {dev:?}
initial_method = {method:?}
output_dir = "runs"
mock_scripts = [{scripts}]

[optimizer]
candidates = 3

[evolution]
pool_size = 20

[gateway]
backend = "mock"
base_delay_ms = 0
max_delay_ms = 0
{extra}
"#,
        seed = fixture("seed.jsonl"),
        dev = fixture("dev.jsonl"),
        method = fixture("initial_method.txt"),
        scripts = names.join(", "),
    );
    let path = dir.join("evolver.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(evolver().arg("--config").arg(tmp.path().join("nope.toml")).arg("optimize"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}

#[test]
fn unknown_optimizer_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("evolver.toml");
    std::fs::write(&path, "[optimizer]\nbatchsize = 10\n").unwrap();
    let out = run(evolver().arg("--config").arg(&path).arg("optimize"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_seed_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &[], "");
    let text = std::fs::read_to_string(&config).unwrap().replace(&fixture("seed.jsonl"), "gone.jsonl");
    std::fs::write(&config, text).unwrap();
    let out = run(evolver().arg("--config").arg(&config).arg("optimize"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gone.jsonl"));
}

#[test]
fn optimize_writes_artifacts_and_masks_key() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &[], "");
    let out = run(evolver()
        .arg("--config")
        .arg(&config)
        .args(["--run-id", "opt", "optimize"])
        .env("EVOLVER_API_KEY", "sk-secret-value"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Plateau") && stdout.contains("step2-cand2"), "{stdout}");
    let dir = tmp.path().join("runs/opt");
    for f in ["method_best.txt", "audit.json", "ledger.json", "config.toml"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let snapshot = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(!snapshot.contains("sk-secret-value"));
    assert!(snapshot.contains("***"));
}

#[test]
fn aborted_optimize_exits_1_and_keeps_partial_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let abort = r##"{"rules":[{"role":"optimizer","contains":"#Current Method#","fatal":"model unavailable"}]}"##;
    let config = write_config(tmp.path(), &[("abort.json", abort)], "max_retries = 0");
    let out = run(evolver().arg("--config").arg(&config).args(["--run-id", "cut", "optimize"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model unavailable"));
    let dir = tmp.path().join("runs/cut");
    let audit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["termination"], "aborted");
    // the incumbent is still the initial method
    let best = std::fs::read_to_string(dir.join("method_best.txt")).unwrap();
    assert!(best.starts_with("E0."));
    assert!(dir.join("ledger.json").exists());
}

fn evolve_with_fatal(pattern: &str) -> (Output, PathBuf, tempfile::TempDir) {
    let tmp = tempfile::tempdir().unwrap();
    let fatal = format!(r#"{{"rules":[{{"role":"evol","regex":{pattern:?},"fatal":"refused"}}]}}"#);
    let config = write_config(tmp.path(), &[("fatal.json", &fatal)], "max_retries = 0");
    let out = run(evolver()
        .arg("--config")
        .arg(&config)
        .args(["--run-id", "ev", "evolve", "--method"])
        .arg(fixture("initial_method.txt")));
    let dir = tmp.path().join("runs/ev");
    (out, dir, tmp)
}

#[test]
fn evolve_under_failure_threshold_succeeds() {
    // 2 of 24 seeds fail: 0.083 <= 0.1
    let (out, dir, _tmp) = evolve_with_fatal("Fibonacci|sky appears");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["failed_records"], 2);
    assert_eq!(report["evolved_records"], 22);
}

#[test]
fn evolve_over_failure_threshold_exits_1() {
    // 3 of 24 seeds fail: 0.125 > 0.1
    let (out, dir, _tmp) = evolve_with_fatal("Natalia|Fibonacci|sky appears");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("3 of 24"));
    assert!(dir.join("evolved.jsonl").exists());
    assert!(dir.join("report.json").exists());
}

#[test]
fn estimate_cost_without_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(evolver()
        .current_dir(tmp.path())
        .args(["estimate-cost", "--datasize", "10000", "--rounds", "5"]));
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("100000"));
}

#[test]
fn mix_rejects_missing_input() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &[], "");
    let out = run(evolver()
        .arg("--config")
        .arg(&config)
        .args(["mix", "--input", "absent.jsonl", "--rounds", "1"]));
    assert_eq!(out.status.code(), Some(2));
}
