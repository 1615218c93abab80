use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdenmpc")).args(args).output().expect("binary runs")
}

/// Writes `cfg` with its output directory pointed at `dir/out`.
fn write_config(dir: &Path, mut cfg: Value) -> (PathBuf, PathBuf) {
    let out = dir.join("out");
    cfg["output"]["directory"] = json!(out);
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    (path, out)
}

fn short_run(method: &str, duration: f64) -> Value {
    json!({
        "nmpc": { "method": method },
        "sim": { "duration_s": duration, "repeats": 1 },
        "output": { "states": true }
    })
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn malformed_config_exits_one_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, "{ \"nmpc\": { \"horizon\": ").unwrap();
    for cmd in ["run-bench", "compare", "analyze", "check"] {
        let out = run(&[cmd, path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(1), "{cmd}");
        assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    }
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn invalid_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (path, out) = write_config(dir.path(), json!({ "nmpc": { "n_stages": 0 } }));
    assert_eq!(run(&["run-bench", path.to_str().unwrap()]).status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn zero_duration_gives_empty_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (path, out) = write_config(dir.path(), short_run("fgs", 0.0));
    let res = run(&["run-bench", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let (header, rows) = read_csv(&out.join("closed_loop.csv"));
    assert!(rows.is_empty());
    assert_eq!(header.len(), 7 + 16 + 1);
    assert_eq!(header[7], "u_1");
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["total_steps"], 0);
}

#[test]
fn empty_analysis_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (path, out) = write_config(dir.path(), json!({}));
    let res = run(&["analyze", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    assert!(!out.exists());
}

#[test]
fn closed_loop_tables_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (path, out) = write_config(dir.path(), short_run("newton", 15.0));
    let first = run(&["run-bench", path.to_str().unwrap()]);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let (header, rows_a) = read_csv(&out.join("closed_loop.csv"));
    let expected = ["step", "t_s", "iters", "solve_time_ms", "mean_iter_time_ms", "kkt_inf_norm", "alpha_min"];
    assert_eq!(&header[..7], expected);
    assert_eq!(header.last().unwrap(), "tracking_rms_K");
    assert_eq!(rows_a.len(), 3);
    let (state_header, states) = read_csv(&out.join("states.csv"));
    assert_eq!(state_header.len(), 2 + 153);
    assert_eq!(states.len(), 4);

    let second = run(&["run-bench", path.to_str().unwrap()]);
    assert_eq!(second.status.code(), Some(0));
    let (_, rows_b) = read_csv(&out.join("closed_loop.csv"));
    let timing = |c: usize| header[c].contains("time");
    for (a, b) in rows_a.iter().zip(&rows_b) {
        for c in (0..header.len()).filter(|c| !timing(*c)) {
            assert_eq!(a[c], b[c], "column {}", header[c]);
        }
    }
}

#[test]
fn unconverged_solves_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_run("fgs", 5.0);
    cfg["nmpc"]["max_iters"] = json!(1);
    cfg["nmpc"]["tol"] = json!(1e-12);
    let (path, out) = write_config(dir.path(), cfg);
    let res = run(&["run-bench", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    // the log is still written so the failure can be inspected
    let (_, rows) = read_csv(&out.join("closed_loop.csv"));
    assert_eq!(rows.len(), 1);
}

#[test]
fn lemma_checks_are_tabulated() {
    let dir = tempfile::tempdir().unwrap();
    let (path, out) = write_config(dir.path(), json!({ "analysis": { "lemma_checks": true } }));
    let res = run(&["analyze", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    let (header, rows) = read_csv(&out.join("lemma_checks.csv"));
    assert_eq!(header, ["check", "instance", "value", "tolerance", "passed"]);
    assert!(!rows.is_empty());
    assert!(!out.join("factors.csv").exists());
}
