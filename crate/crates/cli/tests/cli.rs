use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodeadj"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn record(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is a JSON run record")
}

#[test]
fn verify_grad_json_record() {
    let out = run(&["verify-grad", "--scheme", "midpoint", "--seed", "3", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = record(&out);
    assert_eq!(r["command"], "verify-grad");
    assert_eq!(r["status"], "pass");
    assert_eq!(r["seed"], 3);
    assert_eq!(r["config"]["scheme"], "midpoint");
    assert!(r["metrics"]["max_relative_error"].as_f64().unwrap() <= 1e-5);
    assert_eq!(r["counters"]["nfe_forward"], 2 * 10);
    assert!(r["wall_time_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn zero_steps_is_a_usage_error() {
    let out = run(&["verify-grad", "--steps", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_scheme_is_a_usage_error() {
    let out = run(&["verify-grad", "--scheme", "rk45"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_assertion_exits_3() {
    let out = run(&["verify-grad", "--steps", "2", "--tolerance", "1e-300"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"scheme": "euler", "steps": 4, "width": 5}"#).unwrap();
    let out = run(&[
        "verify-grad",
        "--config",
        cfg.to_str().unwrap(),
        "--scheme",
        "rk4",
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let r = record(&out);
    assert_eq!(r["config"]["scheme"], "rk4");
    assert_eq!(r["config"]["steps"], 4);
    assert_eq!(r["config"]["width"], 5);
}

#[test]
fn unreadable_config_is_a_usage_error() {
    let out = run(&["order-study", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_grad_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let out = run(&["verify-grad", "--scheme", "cn", "--steps", "3", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(report["scheme"], "cn");
    assert!(!report["components"].as_array().unwrap().is_empty());
}

#[test]
fn compare_adjoint_quadratic_order() {
    let out = run(&["compare-adjoint", "--problem", "quadratic", "--h", "1e-2,1e-3", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let r = record(&out);
    for row in r["metrics"]["rows"].as_array().unwrap() {
        let ratio = row["ratio"].as_f64().unwrap();
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }
}

#[test]
fn compare_adjoint_rejects_implicit_scheme() {
    let out = run(&["compare-adjoint", "--scheme", "beuler"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_bench_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let out = run(&["checkpoint-bench", "--nt-max", "12", "--nc-max", "4", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("nt,nc,p_tilde,dp_count,max_slots,recomputed_steps"));
    assert_eq!(lines.count(), 12 * 4);
    assert!(csv.contains("\n10,3,6,6,"));
}

#[test]
fn order_study_subset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("orders.csv");
    let out = run(&[
        "order-study",
        "--problem",
        "exp",
        "--schemes",
        "euler,rk4",
        "--out",
        path.to_str().unwrap(),
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let r = record(&out);
    let rk4 = r["metrics"]["observed_order"]["rk4"].as_f64().unwrap();
    assert!((rk4 - 4.0).abs() < 0.2);
    assert_eq!(fs::read_to_string(path).unwrap().lines().count(), 1 + 2 * 3);
}

#[test]
fn fit_zero_epochs_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "fit",
        "robertson",
        "--epochs",
        "0",
        "--width",
        "8",
        "--depth",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = record(&out);
    assert_eq!(r["metrics"]["epochs_completed"], 0);
    assert_eq!(r["metrics"]["initial_loss"], r["metrics"]["final_loss"]);
    let csv = fs::read_to_string(dir.path().join("dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 40);
    let training: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("training.json")).unwrap()).unwrap();
    assert!(training["epochs"]["loss"].as_array().unwrap().is_empty());
    let model = fs::read_to_string(dir.path().join("model.json")).unwrap();
    assert!(model.contains("theta"));
}

#[test]
fn fit_short_run_is_deterministic() {
    let args = [
        "fit", "robertson", "--epochs", "3", "--width", "6", "--depth", "2", "--seed", "7", "--log-every", "0",
        "--json",
    ];
    let a = record(&run(&args));
    let b = record(&run(&args));
    assert_eq!(a["metrics"]["final_loss"], b["metrics"]["final_loss"]);
    assert_eq!(a["metrics"]["epochs_completed"], 3);
}

#[test]
fn solver_failure_exits_4() {
    let out = run(&[
        "fit", "robertson", "--scheme", "dopri5", "--epochs", "1", "--max-steps", "3", "--width", "4", "--depth", "1",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
