use std::path::Path;
use std::process::{Command, Output};

use ldg::io::{read_grad_table, read_matrix, read_occupancy_column, read_rows, MinmaxLogPoint, TdCurvePoint};
use ldg::report::read_curves;

fn ldg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldg")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    serde_json::from_str(&text).expect("stdout is one JSON document")
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_writes_tables_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = ldg(&["solve", "--env", "grid-3", "--gamma", "0.9", "--out", path_arg(dir.path())]);
    let summary = stdout_json(&out);
    let ldg_grad: Vec<f64> = serde_json::from_value(summary["grad_ldg"].clone()).unwrap();
    let classical: Vec<f64> = serde_json::from_value(summary["grad_classical"].clone()).unwrap();
    assert_eq!(ldg_grad.len(), 36);
    for (a, b) in ldg_grad.iter().zip(&classical) {
        assert!((a - b).abs() < 1e-10);
    }
    let d = read_occupancy_column(&dir.path().join("occupancy.csv")).unwrap();
    assert!((d.sum() - 1.0).abs() < 1e-12);
    let w = read_grad_table(&dir.path().join("grad_table.csv"), 0.9).unwrap();
    assert_eq!(w.w.shape(), (36, 36));
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn solve_without_out_writes_nothing() {
    let out = ldg(&["solve", "--env", "grid-2", "--gamma", "1"]);
    let summary = stdout_json(&out);
    assert!(summary["grad_classical"].is_null());
    assert!(summary["residual_ratio"].as_f64().unwrap().is_finite());
}

#[test]
fn td_writes_learning_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = ldg(&[
        "td", "--env", "grid-2", "--gamma", "0.9", "--iterations", "20000", "--stride", "5000", "--rm-a", "10", "--out",
        path_arg(dir.path()),
    ]);
    let summary = stdout_json(&out);
    assert!(summary["weighted_l1_error"].as_f64().unwrap().is_finite());
    let curve: Vec<TdCurvePoint> = read_rows(&dir.path().join("td_curve.csv")).unwrap();
    assert_eq!(curve.iter().map(|p| p.iteration).collect::<Vec<_>>(), vec![5000, 10000, 15000, 20000]);
    assert!(curve.last().unwrap().weighted_l1_error < curve[0].weighted_l1_error);
    let header = std::fs::read_to_string(dir.path().join("td_curve.csv")).unwrap();
    assert!(header.starts_with("iteration,weighted_L1_error,wall_clock_ns"));
}

#[test]
fn minmax_writes_run_log_and_saddle_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let out = ldg(&[
        "minmax", "--env", "grid-2", "--gamma", "0.9", "--iterations", "4000", "--stride", "1000", "--eps", "0.2",
        "--out", path_arg(dir.path()),
    ]);
    stdout_json(&out);
    let log: Vec<MinmaxLogPoint> = read_rows(&dir.path().join("run_log.csv")).unwrap();
    assert_eq!(log.len(), 4);
    assert!(log.iter().all(|p| p.optimality_gap.unwrap() >= 0.0));
    let g = read_matrix(&dir.path().join("saddle").join("G.csv")).unwrap();
    assert_eq!(g.shape(), (33, 33));
    for name in ["h", "A", "B", "C", "m"] {
        assert!(dir.path().join("saddle").join(format!("{name}.csv")).exists());
    }
    assert!(dir.path().join("w_table.csv").exists());
}

#[test]
fn compare_emits_curves_for_each_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"env": "grid-2", "iterations": 5, "budget": 500, "seeds": [0, 1]}"#).unwrap();
    let out = ldg(&[
        "compare", "--config", path_arg(&config), "--estimators", "reinforce,theoretical-ldg", "--out",
        path_arg(dir.path()),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    let records = read_curves(&dir.path().join("curves.csv")).unwrap();
    assert_eq!(records.len(), 2 * 2 * 6);
    assert!(dir.path().join("curves.svg").exists());
}

#[test]
fn exit_codes_follow_error_class() {
    // Invalid configuration.
    assert_eq!(ldg(&["solve", "--env", "grid-1"]).status.code(), Some(2));
    assert_eq!(ldg(&["compare", "--env", "grid-2", "--estimators", "nope"]).status.code(), Some(2));
    assert_eq!(ldg(&["solve", "--gamma-eval", "1.0"]).status.code(), Some(2));
    // Model assumption: G is singular without the tau block at gamma = 1.
    let singular = ldg(&["minmax", "--env", "grid-2", "--gamma", "1", "--lambda", "0", "--iterations", "10"]);
    assert_eq!(singular.status.code(), Some(3));
    // I/O.
    let missing = ldg(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/config.json"));
}
