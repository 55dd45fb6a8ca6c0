use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kinspec::threshold::{CalibrationTable, TABLE_HEADER};

fn kinspec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinspec")).args(args).output().unwrap()
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn conf(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn assert_one_line_failure(out: &Output, needle: &str) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains(needle), "{err}");
}

#[test]
fn run_writes_report_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = kinspec(&[
        "run",
        "--config",
        &conf("default.conf"),
        "--out",
        out_dir.to_str().unwrap(),
        "--mode",
        "kerv",
        "--suite",
        "spatial",
        "--trials",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert_eq!(report, String::from_utf8(out.stdout).unwrap());
    assert_eq!(report.lines().count(), 2);
    assert!(report.contains("kerv"));
    assert_eq!(fs::read_dir(out_dir.join("traces")).unwrap().count(), 3);
    let episodes = fs::read_to_string(out_dir.join("episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 4);
}

#[test]
fn unknown_config_key_fails_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    fs::write(&path, "kf.pll = 2\n").unwrap();
    let out = kinspec(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_one_line_failure(&out, "kf.pll");
}

#[test]
fn missing_config_fails_on_one_line() {
    let out = kinspec(&["run", "--config", "/nonexistent/x.conf", "--out", "/tmp/never"]);
    assert_one_line_failure(&out, "/nonexistent/x.conf");
}

#[test]
fn unknown_suite_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = kinspec(&["run", "--out", dir.path().to_str().unwrap(), "--suite", "nope", "--trials", "1"]);
    assert_one_line_failure(&out, "nope");
}

#[test]
fn calibrate_round_trips_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let sample = dir.path().join("sample");
    let out = kinspec(&[
        "run",
        "--config",
        &conf("presample.conf"),
        "--out",
        sample.to_str().unwrap(),
        "--trials",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let table = dir.path().join("table.csv");
    let out = kinspec(&[
        "calibrate",
        "--traces",
        sample.to_str().unwrap(),
        "--grid",
        &conf("grid.conf"),
        "--out",
        table.to_str().unwrap(),
        "--key",
        &conf("norm_key.conf"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().next().unwrap(), TABLE_HEADER);
    let parsed = CalibrationTable::load(&table).unwrap();
    assert_eq!(parsed.rows().len(), 4);
    assert_eq!(parsed.to_text(), text);

    let run_conf = dir.path().join("run.conf");
    fs::write(&run_conf, format!("threshold.table = {}\nrun.modes = kerv\n", table.display())).unwrap();
    let out = kinspec(&[
        "run",
        "--config",
        run_conf.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--trials",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn calibrate_without_traces_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = kinspec(&[
        "calibrate",
        "--traces",
        dir.path().to_str().unwrap(),
        "--grid",
        &conf("grid.conf"),
        "--out",
        dir.path().join("t.csv").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim_end().lines().count(), 1);
}

#[test]
fn shipped_table_matches_the_header() {
    let table = CalibrationTable::load(configs().join("calibration.csv")).unwrap();
    assert!(table.rows().iter().all(|r| r.kvar_ref > 0.0 && r.phi < 0.0));
}

#[test]
fn sweep_prints_one_row_per_value() {
    let out = kinspec(&["sweep", "--param", "pl", "--values", "1,2", "--trials", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);

    let out = kinspec(&["sweep", "--param", "pl", "--values", "1,x"]);
    assert_one_line_failure(&out, "`x`");
    let out = kinspec(&["sweep", "--param", "q", "--values", "1"]);
    assert!(!out.status.success());
}
