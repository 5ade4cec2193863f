use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_erm-oracle");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_config(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    cli(&args)
}

#[test]
fn bounds_prints_flat_json() {
    let out = cli(&["bounds", "--lemma", "4.1", "--n", "200", "--p", "10", "--C", "2", "--K", "1", "--estar", "0.12", "--m", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["value"].as_f64().unwrap() - 0.779423).abs() < 1e-3);
    assert!(v["branch"].is_string());
}

#[test]
fn bounds_missing_parameter_is_config_error() {
    let out = cli(&["bounds", "--lemma", "4.1", "--n", "200", "--p", "10", "--estar", "0.1", "--m", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--C"));
}

#[test]
fn unknown_bound_id_is_config_error() {
    let out = cli(&["bounds", "--lemma", "9.9", "--n", "200", "--p", "10", "--estar", "0.1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ \"problem\": ").unwrap();
    assert_eq!(run_config("simulate", &bad, &dir.path().join("o"), &[]).status.code(), Some(2));
    fs::write(&bad, r#"{ "problem": { "kind": "lower_bound", "n": 64, "s": 3.0 }, "reps": 10, "seed": 1, "bogus": 1 }"#)
        .unwrap();
    assert_eq!(run_config("simulate", &bad, &dir.path().join("o"), &[]).status.code(), Some(2));
}

#[test]
fn missing_config_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config("simulate", &dir.path().join("absent.json"), &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unwritable_output_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    // A regular file where the output directory should go.
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = run_config("simulate", &configs().join("lower_bound_64.json"), &blocker.join("sub"), &["--reps", "4"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn single_rep_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config("simulate", &configs().join("lower_bound_64.json"), dir.path(), &["--reps", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "rep,selected,hat_e,hat_e_alpha,estar,ratio");
}

#[test]
fn verify_needs_two_reps() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config("verify", &configs().join("lower_bound_64.json"), dir.path(), &["--reps", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_same_bytes_for_any_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("quadratic_gaussian.json");
    let mut csvs = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "3"), ("c", "1")] {
        let out_dir = dir.path().join(name);
        let out = run_config("simulate", &cfg, &out_dir, &["--reps", "300", "--workers", workers]);
        assert_eq!(out.status.code(), Some(0));
        csvs.push(fs::read(out_dir.join("trials.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0], csvs[2]);
    let other = dir.path().join("d");
    run_config("simulate", &cfg, &other, &["--reps", "300", "--seed", "4"]);
    assert_ne!(csvs[0], fs::read(other.join("trials.csv")).unwrap());
}

#[test]
fn run_json_records_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config("simulate", &configs().join("lower_bound_64.json"), dir.path(), &["--reps", "7", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(0));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["experiment"]["reps"], 7);
    assert_eq!(run["experiment"]["seed"], 9);
}

#[test]
fn lower_bound_summary_reports_tail_at_spike() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config("simulate", &configs().join("lower_bound_64.json"), dir.path(), &["--reps", "2000"]);
    assert_eq!(out.status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let tail = &summary["tails"][0];
    assert_eq!(tail["threshold"].as_f64(), Some(1.0 / 16.0));
    // Ê takes only the values 0 and 1/16, so the tail is the misselection rate.
    let csv = fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    let hits = csv.lines().skip(1).filter(|l| l.split(',').nth(2) == Some("0.0625")).count();
    assert_eq!(tail["frequency"].as_f64(), Some(hits as f64 / 2000.0));
    assert!(tail["frequency"].as_f64().unwrap() > 0.1175);
}

#[test]
fn verify_passes_on_shipped_configs() {
    for name in ["quadratic_gaussian.json", "small_p_pareto.json", "halved_c_lower_bound.json"] {
        let dir = tempfile::tempdir().unwrap();
        let out = run_config("verify", &configs().join(name), dir.path(), &[]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stdout));
        let verdicts: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("verdicts.json")).unwrap()).unwrap();
        assert!(verdicts.as_array().unwrap().iter().all(|v| v["pass"] == true));
    }
}

#[test]
fn falsified_bound_exits_with_violation() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config("verify", &configs().join("falsified_lower_bound.json"), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    let verdicts: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verdicts.json")).unwrap()).unwrap();
    assert!(verdicts.as_array().unwrap().iter().any(|v| v["pass"] == false));
}
