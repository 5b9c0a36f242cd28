//! The `qmri` binary: exit codes, error lines and the files each command writes.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "data.preset = desk
data.size = 16
seq.L = 6
solver.p = 4
solver.max_outer = 6
solver.lm_iters = 6
";

fn qmri(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmri")).args(args).env("QMRI_THREADS", "1").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_error_line(o: &Output, code: i32, tag: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error code={tag} msg=")), "{err}");
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate_small(dir: &Path) {
    let cfg = dir.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let o = qmri(&["simulate", "--config", path(&cfg), "--out", path(dir)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn phantom_writes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = qmri(&["phantom", "--size", "64", "--seed", "7", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["truth.pim", "rho_truth.png", "t1_truth.png", "t2_truth.png", "phantom.csv", "config_resolved.txt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let truth = qmri::data::read_parameter_image(std::fs::File::open(dir.path().join("truth.pim")).unwrap()).unwrap();
    assert_eq!(truth.dims(), (64, 64));
    let csv = std::fs::read_to_string(dir.path().join("phantom.csv")).unwrap();
    assert!(csv.starts_with("label,name,center_row,center_col,axis_row,axis_col,angle,rho,t1,t2"));
    assert_eq!(csv.lines().count(), 1 + 7);
}

#[test]
fn missing_config_is_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = qmri(&["simulate", "--config", path(&dir.path().join("nope.cfg")), "--out", path(dir.path())]);
    assert_error_line(&o, 1, "CONFIG");
    let o = qmri(&["reconstruct", "--out", path(&dir.path().join("empty"))]);
    assert_error_line(&o, 1, "CONFIG");
}

#[test]
fn misspelled_key_and_bad_flag_are_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "data.sigmaa = 2\n").unwrap();
    assert_error_line(&qmri(&["simulate", "--config", path(&cfg), "--out", path(dir.path())]), 1, "CONFIG");
    assert_error_line(&qmri(&["simulate", "--bogus"]), 1, "USAGE");
    assert_error_line(&qmri(&["phantom", "--preset", "huge", "--out", path(dir.path())]), 1, "CONFIG");
}

#[test]
fn simulate_reconstruct_compare_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    for f in ["truth.pim", "data.ksp", "config_resolved.txt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let o = qmri(&["reconstruct", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for v in ["nested", "one-step", "lm"] {
        assert!(dir.path().join(format!("trace_{v}.csv")).exists());
    }

    let o = qmri(&["compare", path(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let header = out.lines().next().unwrap();
    assert_eq!(
        header,
        "setting,variant,source,rel_t1,rel_t2,rel_rho,outer_iterations,final_objective,final_data_term,stop"
    );
    let measured: Vec<&str> = out.lines().filter(|l| l.contains(",measured,")).collect();
    assert_eq!(measured.len(), 3);
    for l in &measured {
        let fields: Vec<&str> = l.split(',').collect();
        assert_eq!(fields.len(), 10);
        assert!(fields[3..6].iter().all(|f| f.parse::<f64>().unwrap() >= 0.0));
    }
    assert_eq!(out.lines().filter(|l| l.contains(",reference-only,")).count(), 8);
    assert_eq!(std::fs::read_to_string(dir.path().join("report.csv")).unwrap(), out);

    let o = qmri(&["diagnose", "--variant", "lm", path(dir.path())]);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 6, "{text}");
    assert!(text.lines().all(|l| l.starts_with("lm ")));
    assert_eq!(o.status.code(), Some(if text.contains(" FAIL ") { 2 } else { 0 }));
}

#[test]
fn diagnose_locates_corrupted_row() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    assert_eq!(qmri(&["reconstruct", "--variant", "lm", "--out", path(dir.path())]).status.code(), Some(0));
    let trace_path = dir.path().join("trace_lm.csv");
    let mut rows = qmri::solver::read_trace_file(&trace_path).unwrap();
    assert!(rows.len() > 4);
    rows[3].objective = rows[2].objective * 2.0;
    qmri::solver::write_trace_file(&rows, &trace_path).unwrap();
    let o = qmri(&["diagnose", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("lm monotone_objective FAIL first violation at k = 3"), "{}", stdout(&o));
    assert!(stderr(&o).starts_with("error code=DIAGNOSTICS_FAILED msg="));
    assert!(stderr(&o).contains("lm:monotone_objective@3"));

    // an empty trace is a configuration error
    std::fs::write(&trace_path, "").unwrap();
    assert_error_line(&qmri(&["diagnose", path(dir.path())]), 1, "CONFIG");
    let empty = tempfile::tempdir().unwrap();
    assert_error_line(&qmri(&["diagnose", path(empty.path())]), 1, "CONFIG");
}

#[test]
fn resolved_config_alone_reproduces_a_run() {
    let a = tempfile::tempdir().unwrap();
    simulate_small(a.path());
    assert_eq!(qmri(&["reconstruct", "--out", path(a.path())]).status.code(), Some(0));

    let b = tempfile::tempdir().unwrap();
    let cfg = b.path().join("resolved.cfg");
    std::fs::copy(a.path().join("config_resolved.txt"), &cfg).unwrap();
    let run = b.path().join("run");
    assert_eq!(qmri(&["simulate", "--config", path(&cfg), "--out", path(&run)]).status.code(), Some(0));
    assert_eq!(qmri(&["reconstruct", "--out", path(&run)]).status.code(), Some(0));
    for f in ["report.csv", "trace_nested.csv", "trace_one-step.csv", "trace_lm.csv", "data.ksp", "truth.pim"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(run.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_flag_rederives_subsystem_seeds() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(qmri(&["phantom", "--size", "32", "--seed", "3", "--out", path(a.path())]).status.code(), Some(0));
    assert_eq!(qmri(&["phantom", "--size", "32", "--seed", "4", "--out", path(b.path())]).status.code(), Some(0));
    assert_ne!(std::fs::read(a.path().join("truth.pim")).unwrap(), std::fs::read(b.path().join("truth.pim")).unwrap());
}
