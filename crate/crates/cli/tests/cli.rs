use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn causalkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causalkit"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = causalkit(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn simulate_then_fit_dr_gbr_recovers_constant_effect() {
    let dir = tempfile::tempdir().unwrap();
    let d = s(dir.path());
    ok(&[
        "simulate",
        "--dgp",
        "DGP-CONST",
        "--n",
        "2000",
        "--seed",
        "7",
        "--outdir",
        &d,
    ]);
    let input = s(&dir.path().join("data.csv"));
    ok(&[
        "fit",
        "--estimator",
        "dr-gbr",
        "--bootstrap",
        "10",
        "--seed",
        "7",
        "--input",
        &input,
        "--outdir",
        &d,
    ]);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["N"], 2000);
    let est = &report["estimates"][0];
    assert_eq!(est["estimator"], "dr-gbr");
    let ate = est["ATE"].as_f64().unwrap();
    let (lo, hi) = (
        est["CI"]["low"].as_f64().unwrap(),
        est["CI"]["high"].as_f64().unwrap(),
    );
    assert!(lo <= ate && ate <= hi, "{ate} outside [{lo}, {hi}]");
    assert!((ate - 5.0).abs() < 0.25, "ATE {ate}");
    assert!(dir.path().join("draws_dr-gbr.csv").exists());
    assert!(dir.path().join("run.conf").exists());

    ok(&["report", "--outdir", &d]);
    let table = std::fs::read_to_string(dir.path().join("ate_comparison.csv")).unwrap();
    let model = est["model"].as_str().unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(table.lines().any(|l| l.contains(model)), "{table}");
}

#[test]
fn missing_treatment_column_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    std::fs::write(&csv, "y,x1\n1,2\n3,4\n").unwrap();
    let out = causalkit(&["fit", "--input", &s(&csv), "--outdir", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error SCHEMA_TREATMENT:"), "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    let out = causalkit(&["fit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error USAGE:"));
    let out = causalkit(&["fit", "--estimator", "magic", "--input", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let out = causalkit(&["fit"]);
    assert_eq!(out.status.code(), Some(1), "no input");
}

#[test]
fn screen_writes_ranked_columns() {
    let dir = tempfile::tempdir().unwrap();
    let d = s(dir.path());
    ok(&[
        "simulate", "--dgp", "DGP-CONF", "--n", "500", "--d", "8", "--seed", "2", "--outdir", &d,
    ]);
    let input = s(&dir.path().join("data.csv"));
    ok(&["screen", "--k", "2", "--input", &input, "--outdir", &d]);
    let text = std::fs::read_to_string(dir.path().join("screening.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("rank,column,coefficient"));
    let cols: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(cols, ["x1", "x2"]);
}
