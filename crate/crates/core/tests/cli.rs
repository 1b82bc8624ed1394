use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(format!("{name}.toml"))
}

fn mvlasov(args: &[&str]) -> (i32, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_mvlasov"))
        .args(args)
        .output()
        .unwrap();
    let json = serde_json::from_slice(&out.stdout).unwrap_or(Value::Null);
    (out.status.code().unwrap(), json)
}

fn run(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> (i32, Value) {
    let mut args = vec![
        cmd,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    mvlasov(&args)
}

#[test]
fn heat_solve_reports_closed_form_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, summary) = run("solve", &config("heat"), dir.path(), &[]);
    assert_eq!(code, 0);
    assert_eq!(summary["pass"], true);
    assert!(
        summary["results"]["l1_error_vs_closed_form"]
            .as_f64()
            .unwrap()
            <= 1e-4
    );
    let written: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(written, summary);
    let csv = std::fs::read_to_string(dir.path().join("solve_fields.csv")).unwrap();
    assert!(csv.starts_with("t,x,value\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 801);
}

#[test]
fn validate_passes_on_benchmarks() {
    for name in [
        "heat",
        "mean_reversion",
        "sensitivity",
        "spde_constant",
        "spde_matrix",
        "spde_linear",
    ] {
        let dir = tempfile::tempdir().unwrap();
        let (code, summary) = run("validate", &config(name), dir.path(), &[]);
        assert_eq!(code, 0, "{name}: {summary}");
        assert!(!summary["checks"].as_array().unwrap().is_empty());
    }
}

#[test]
fn repeated_runs_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(
        "spde",
        &config("spde_constant"),
        a.path(),
        &["--workers", "1"],
    );
    run(
        "spde",
        &config("spde_constant"),
        b.path(),
        &["--workers", "3"],
    );
    for file in ["summary.json", "path_7.csv", "path_10.csv"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
}

#[test]
fn seed_and_strict_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let (code, summary) = run(
        "spde",
        &config("spde_constant"),
        dir.path(),
        &["--seed", "40", "--strict"],
    );
    assert_eq!(code, 0);
    assert_eq!(summary["seed"], 40);
    assert_eq!(summary["config"]["run"]["strict"], true);
    assert_eq!(
        summary["results"]["path_seeds"],
        serde_json::json!([40, 41, 42, 43])
    );
}

#[test]
fn unknown_keys_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("heat"))
        .unwrap()
        .replace("steps = 100", "steps = 100\nstep_size = 0.1");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, text).unwrap();
    let (code, record) = run("solve", &cfg, dir.path(), &[]);
    assert_eq!(code, 3);
    assert_eq!(record["error"]["kind"], "config");
}

#[test]
fn missing_config_and_bad_flags_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run("solve", &dir.path().join("absent.toml"), dir.path(), &[]);
    assert_eq!(code, 3);
    let (code, _) = mvlasov(&["solve", "--bogus"]);
    assert_eq!(code, 3);
}

#[test]
fn solver_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // Strong attraction on a wide domain: the Picard iteration does not settle.
    let text = std::fs::read_to_string(config("spde_linear"))
        .unwrap()
        .replace("rate = 0.5", "rate = 1.0");
    let cfg = dir.path().join("stiff.toml");
    std::fs::write(&cfg, text).unwrap();
    let (code, record) = run("solve", &cfg, dir.path(), &[]);
    assert_eq!(code, 2);
    assert_eq!(record["error"]["kind"], "numerical");
}

#[test]
fn sensitivity_requires_probes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run("sensitivity", &config("heat"), dir.path(), &[]);
    assert_eq!(code, 3);
}
