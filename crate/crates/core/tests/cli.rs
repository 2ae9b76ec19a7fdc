use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use microgait::sim::{Bitmap, PlantSpec};
use microgait::ControllerParams;

const BIN: &str = env!("CARGO_BIN_EXE_microgait");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["ask"]).status.code(), Some(2));
    assert_eq!(run(&["tell", "--state", "x", "--theta", "1,2", "--cost", "abc"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn fresh_ask_prints_initial_controller() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    let o = run(&["ask", "--state", p(&state)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "645.0,30.0");
    // A second ask without tell is a protocol violation.
    let before = fs::read(&state).unwrap();
    let o = run(&["ask", "--state", p(&state)]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(fs::read(&state).unwrap(), before);
}

#[test]
fn mismatched_tell_exits_3_and_keeps_state() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    assert!(run(&["ask", "--state", p(&state)]).status.success());
    let before = fs::read(&state).unwrap();
    let o = run(&["tell", "--state", p(&state), "--theta", "700,30", "--cost", "1.5"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pending"));
    assert_eq!(fs::read(&state).unwrap(), before);

    let o = run(&["tell", "--state", p(&state), "--theta", "645,30", "--cost", "-0.5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rec: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rec["iteration"], 1);

    let o = run(&["status", "--state", p(&state)]);
    let st: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(st["evaluations"], 1);
    assert_eq!(st["budget"], 20);
    assert!(st["pending"].is_null());
}

#[test]
fn malformed_or_missing_state_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    fs::write(&state, "{ not json").unwrap();
    assert_eq!(run(&["ask", "--state", p(&state)]).status.code(), Some(3));
    assert_eq!(run(&["tell", "--state", p(&state), "--theta", "645,30", "--cost", "1"]).status.code(), Some(3));
    let missing = dir.path().join("nope.json");
    assert_eq!(run(&["status", "--state", p(&missing)]).status.code(), Some(3));
    assert_eq!(run(&["tell", "--state", p(&missing), "--theta", "645,30", "--cost", "1"]).status.code(), Some(3));
}

#[test]
fn ask_uses_config_file_for_new_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("opt.cfg");
    fs::write(&cfg, "kernel = SE\nbudget = 2\ninitial.wavelength_um = 500\ninitial.duty_cycle_pct = 25\n").unwrap();
    let state = dir.path().join("s.json");
    let o = run(&["ask", "--state", p(&state), "--config", p(&cfg)]);
    assert_eq!(stdout(&o).trim(), "500.0,25.0");
    assert!(run(&["tell", "--state", p(&state), "--theta", "500,25", "--cost", "1"]).status.success());
    let o = run(&["ask", "--state", p(&state)]);
    let theta = ControllerParams::parse(stdout(&o).trim()).unwrap();
    assert!(theta.in_box());
    let t = theta.to_string();
    assert!(run(&["tell", "--state", p(&state), "--theta", &t, "--cost", "0.5"]).status.success());
    assert_eq!(run(&["ask", "--state", p(&state)]).status.code(), Some(3));

    fs::write(&cfg, "kernel = XYZ\n").unwrap();
    let other = dir.path().join("t.json");
    assert_eq!(run(&["ask", "--state", p(&other), "--config", p(&cfg)]).status.code(), Some(3));
    assert!(!other.exists());
}

#[test]
fn fit_velocity_on_golden_trace() {
    let o = run(&["fit-velocity", "--trace", p(&data("golden_trace.csv")), "--v-star", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let fit: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let v_m = fit["v_m"].as_f64().unwrap();
    let truth = PlantSpec::default().speed(&ControllerParams::new(380.0, 43.0).unwrap()).unwrap();
    assert!((v_m - truth).abs() <= 0.02 * truth, "{v_m} vs {truth}");
    assert!((fit["cost"].as_f64().unwrap() - (3.0 - v_m).abs()).abs() < 1e-12);
    assert_eq!(fit["samples_used"], 181);

    let o = run(&["fit-velocity", "--trace", p(&data("golden_trace.csv")), "--t-cut", "30"]);
    assert_eq!(o.status.code(), Some(3));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "t_s,x_um\n0,1\nzero,2\n").unwrap();
    assert_eq!(run(&["fit-velocity", "--trace", p(&bad)]).status.code(), Some(3));
}

#[test]
fn simulate_reproduces_golden_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.csv");
    assert!(run(&["simulate", "--theta", "380,43", "--seed", "11", "--out", p(&out)]).status.success());
    assert_eq!(fs::read(&out).unwrap(), fs::read(data("golden_trace.csv")).unwrap());
    assert_eq!(run(&["simulate", "--theta", "100,43", "--out", p(&out)]).status.code(), Some(3));
}

#[test]
fn pattern_writes_packed_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("frame.bin");
    let pgm = dir.path().join("frame.pgm");
    let o = run(&[
        "pattern", "--wavelength-px", "300", "--duty-pct", "40", "--freq-hz", "1", "--out", p(&out), "--pgm", p(&pgm),
        "--width", "600", "--height", "3",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let bytes = fs::read(&out).unwrap();
    assert_eq!(&bytes[..8], &[88, 2, 0, 0, 3, 0, 0, 0]);
    assert_eq!(bytes.len(), 8 + (600 * 3usize).div_ceil(8));
    let bm = Bitmap::from_packed(&bytes).unwrap();
    let lit = (0..300).filter(|&x| bm.get(x, 0)).count() as f64 / 300.0;
    assert!((lit - 0.40).abs() <= 1.0 / 300.0);
    let text = fs::read_to_string(&pgm).unwrap();
    assert!(text.starts_with("P2\n600 3\n255\n"));

    let o = run(&["pattern", "--wavelength-px", "300", "--duty-pct", "140", "--freq-hz", "1", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bench_writes_reports_and_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("suite.cfg");
    fs::write(&cfg, "suite = SE-EI-sf1-fixed\nruns = 2\nbudget = 3\nseed = 5\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&["bench", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("random"));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("config,kernel,acquisition,signal_variance,hyper_mode,runs,median_regret,p95_regret\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("runs/runlog-SE-EI-sf1-fixed-001.jsonl").exists());

    fs::write(&cfg, "suite = SE-EI-sf1-fixed\nbogus = 1\n").unwrap();
    assert_eq!(run(&["bench", "--config", p(&cfg), "--out", p(&out)]).status.code(), Some(3));
    fs::write(&cfg, "suite = SE-EI-sf1-fixed\nruns = 3\nbudget = 3\nseed = 5\n").unwrap();
    assert_eq!(run(&["bench", "--config", p(&cfg), "--out", p(&out)]).status.code(), Some(3));
}
