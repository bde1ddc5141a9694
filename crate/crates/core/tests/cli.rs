use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_logistic-vb"))
}

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample.libsvm")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(task: &str, config: &Path, extra: &[&str]) -> Output {
    bin().arg(task).arg("--config").arg(config).args(extra).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(dir.path(), "c.json", "{}");
    assert_eq!(bin().output().unwrap().status.code(), Some(1));
    assert_eq!(run("no-such-task", &ok, &[]).status.code(), Some(1));
    assert_eq!(run("bound-grid", &ok, &["--methods", "viper,bogus"]).status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));

    let missing = dir.path().join("absent.json");
    let o = run("bound-grid", &missing, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.json"));

    let bad = write(dir.path(), "bad.json", r#"{"n_repeats": 0}"#);
    assert_eq!(run("logistic-sim", &bad, &[]).status.code(), Some(1));
    let unknown = write(dir.path(), "unknown.json", r#"{"n_repeat": 3}"#);
    assert_eq!(run("logistic-sim", &unknown, &[]).status.code(), Some(1));
    let wrong_task = write(dir.path(), "wrong.json", r#"{"task": "gp-toy"}"#);
    assert_eq!(run("bound-grid", &wrong_task, &[]).status.code(), Some(1));
}

#[test]
fn missing_data_file_exits_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"data_path": "/nowhere/train.libsvm"}"#);
    let o = run("fit-file", &cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nowhere/train.libsvm"), "{}", stderr(&o));

    let malformed = write(dir.path(), "m.libsvm", "+1 1:0.5\n-1 2:abc\n");
    let cfg = write(dir.path(), "m.json", &format!(r#"{{"data_path": {:?}}}"#, malformed));
    assert_eq!(run("fit-file", &cfg, &[]).status.code(), Some(2));
}

#[test]
fn nonconvergence_exits_three_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let base = r#""n_repeats": 1, "logistic_sim": {"n": 60, "p": 3}, "fit": {"max_iters": 2}, "eval_samples": 100"#;
    let strict = write(dir.path(), "s.json", &format!("{{{base}}}"));
    let o = run("logistic-sim", &strict, &["--methods", "viper"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!o.stdout.is_empty(), "the report is still written");
    let lenient = write(dir.path(), "l.json", &format!(r#"{{{base}, "allow_nonconverged": true}}"#));
    assert_eq!(run("logistic-sim", &lenient, &["--methods", "viper"]).status.code(), Some(0));
}

#[test]
fn bundled_sample_fits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(r#"{{"data_path": {:?}, "n_repeats": 2, "eval_samples": 500, "allow_nonconverged": true}}"#, sample()),
    );
    let o = run("fit-file", &cfg, &["--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["task"], "fit-file");
    assert_eq!(report["config"]["seed"], 5);
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 6);
    let keys: Vec<(String, u64)> = runs
        .iter()
        .map(|r| (r["method"].as_str().unwrap().to_string(), r["seed"].as_u64().unwrap()))
        .collect();
    let expected: Vec<(String, u64)> = ["viper", "vipg", "vimc"]
        .iter()
        .flat_map(|m| [6u64, 7].map(|s| (m.to_string(), s)))
        .collect();
    assert_eq!(keys, expected);
    for r in runs {
        let auc = r["metrics"]["auc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
}

#[test]
fn csv_output_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"n_repeats": 5, "gp_toy": {"n_train": 20, "n_test": 10}, "gp": {"inducing": 5}, "fit": {"max_iters": 30}, "eval_samples": 200, "allow_nonconverged": true}"#,
    );
    let out = dir.path().join("runs.csv");
    let o = run("gp-toy", &cfg, &["--repeats", "2", "--methods", "vipg,viper", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(head[..3], ["method", "seed", "elbo_mc"]);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[1])).collect();
    assert_eq!(keys, [("viper", "1"), ("viper", "2"), ("vipg", "1"), ("vipg", "2")]);
    for r in &rows {
        let elbo = r[2];
        let mantissa = elbo.trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17, "{elbo}");
        assert!(elbo.parse::<f64>().unwrap().is_finite());
        // No vimc reference, so the KL columns are empty.
        assert_eq!((r[4], r[5]), ("", ""));
    }
    assert!(dir.path().join("runs_summary.csv").exists());
}

#[test]
fn bound_grid_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"output_format": "both", "grid": {"theta": {"start": -1, "stop": 1, "count": 3}, "tau": {"start": 0.5, "stop": 1, "count": 2}, "orders": [6, 12]}}"#,
    );
    let out = dir.path().join("grid.json");
    let o = run("bound-grid", &cfg, &["--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert!(csv.starts_with("theta,tau,quad,jj,jj_rel_err,eta_l6,rel_err_l6,eta_l12,rel_err_l12,"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn worker_variable_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"grid": {"theta": {"start": 0, "stop": 0, "count": 1}, "tau": {"start": 1, "stop": 1, "count": 1}}}"#);
    let o = bin().args(["bound-grid", "--config"]).arg(&cfg).env("LOGISTIC_VB_WORKERS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = bin().args(["bound-grid", "--config"]).arg(&cfg).env("LOGISTIC_VB_WORKERS", "2").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}
