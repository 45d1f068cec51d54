//! Command-line behaviour: exit codes, output formats and determinism.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_momentbound"));
    c.env_remove("MOMENTBOUND_JOBS");
    c
}

fn net(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../networks")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const INFEASIBLE: &str = r#"{"species": ["X"],
 "parameters": [{"name": "k", "kind": "uncertain", "moments": {}},
                {"name": "m", "kind": "fixed", "value": 1}],
 "reactions": [{"rate": "k", "orders": {}, "stoich": {"X": 1}},
               {"rate": "m", "orders": {"X": 1}, "stoich": {"X": -1}}],
 "constraints": [{"type": "affine", "terms": [{"coeff": 1, "beta": {"k": 1}}], "constant": -3, "sense": ">="},
                 {"type": "affine", "terms": [{"coeff": -1, "beta": {"k": 1}}], "constant": 1, "sense": ">="}]}"#;

#[test]
fn bound_prints_json_and_exits_zero() {
    let o = run(&["bound", &net("dimer.json"), "--target", "X", "--rho", "2", "--sigma", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["lb_status"], "optimal");
    assert_eq!(v["ub_status"], "optimal");
    let (lb, ub) = (v["lb"].as_f64().unwrap(), v["ub"].as_f64().unwrap());
    assert!(lb <= ub);
    assert!((v["gap"].as_f64().unwrap() - (ub - lb)).abs() < 1e-12);
    assert_eq!(v["r"].as_f64(), Some(0.6));
}

#[test]
fn missing_target_is_a_usage_error() {
    let o = run(&["bound", &net("dimer.json")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    assert!(!o.stderr.is_empty());
}

#[test]
fn bad_inputs_exit_one() {
    assert_eq!(run(&["bound", "/nonexistent.json", "--target", "X"]).status.code(), Some(1));
    assert_eq!(
        run(&["bound", &net("dimer.json"), "--target", "X", "--r", "1.5"]).status.code(),
        Some(1)
    );
    assert_eq!(
        run(&["bound", &net("dimer.json"), "--target", "Y"]).status.code(),
        Some(1)
    );
    assert_eq!(
        run(&["bound", &net("dimer.json"), "--target", "X", "--scale", "Q=2"]).status.code(),
        Some(1)
    );
    assert_eq!(
        run(&["bound", &net("dimer.json"), "--target", "X", "--scale", "X=2", "--no-scale"]).status.code(),
        Some(1)
    );
}

#[test]
fn infeasible_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("infeasible.json");
    std::fs::write(&path, INFEASIBLE).unwrap();
    let o = run(&["bound", path.to_str().unwrap(), "--target", "X", "--rho", "2", "--sigma", "1", "--no-scale"]);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["lb_status"], "primal_infeasible");
}

#[test]
fn iteration_limit_exits_three() {
    let o = run(&["bound", &net("dimer.json"), "--target", "X", "--rho", "3", "--sigma", "2", "--max-iters", "1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sdpa_export_has_the_expected_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.dat-s");
    let o = run(&[
        "bound",
        &net("dimer.json"),
        "--target",
        "X",
        "--rho",
        "1",
        "--sigma",
        "1",
        "--direction",
        "min",
        "--export-sdpa",
        path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('"') && !l.starts_with('*')).collect();
    let sizes: Vec<i64> = lines[2]
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    let psd: Vec<i64> = sizes.into_iter().filter(|&s| s > 0).collect();
    assert_eq!(psd, vec![6, 2, 2, 3]);
}

#[test]
fn single_cell_sweep_has_one_row() {
    let o = run(&["sweep", &net("dimer.json"), "--target", "X", "--rho", "2", "--r", "0.2", "--sigma", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "r,sigma,lb,ub,gap,lb_status,ub_status,seconds");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0.2,1,"));
}

#[test]
fn sweep_rows_are_ordered_and_deterministic() {
    let args = [
        "sweep",
        &net("dimer.json"),
        "--target",
        "X",
        "--rho",
        "2",
        "--r",
        "0,0.5",
        "--sigma",
        "1..2",
        "--no-timing",
    ];
    let a = bin().args(args).env("MOMENTBOUND_JOBS", "1").output().unwrap();
    let b = bin().args(args).env("MOMENTBOUND_JOBS", "2").output().unwrap();
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    let keys: Vec<String> = out.lines().skip(1).map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(keys, vec!["0,1", "0,2", "0.5,1", "0.5,2"]);
    assert!(out.lines().skip(1).all(|l| l.ends_with(",optimal,optimal,")));
}

#[test]
fn oracle_check_passes() {
    let o = run(&["check", &net("dimer_fixed.json"), "--rho", "4", "--sigma", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mode"], "oracle");
    assert_eq!(v["verdict"], "PASS");
}

#[test]
fn simulation_check_reports_a_verdict() {
    let o = run(&[
        "check",
        &net("dimer.json"),
        "--rho",
        "3",
        "--sigma",
        "2",
        "--r",
        "0.6",
        "--cells",
        "500",
        "--seed",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mode"], "ssa");
    assert_eq!(v["conditions"].as_array().unwrap().len(), 2);
    assert_eq!(v["verdict"], "PASS");
}
