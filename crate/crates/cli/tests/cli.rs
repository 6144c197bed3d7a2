use std::path::Path;
use std::process::{Command, Output};

fn pqkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pqkd")).args(args).output().expect("spawn pqkd")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
# small enough for a debug build
n_train = 200
n_val = 100
n_test = 100
widths = 8,8,8
epochs_teacher = 2
epochs_student = 3
stats_probes = 4
shots = 50
seeds = 1
bound_trials = 50
hoeffding_trials = 1000
";

#[test]
fn selftest_passes() {
    let o = pqkd(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = pqkd(&["train-pqkd", "--config", "/no/such/run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/run.cfg"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(pqkd(&["train-pqkd", "--bogus"]).status.code(), Some(2));
}

#[test]
fn bad_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "widths = 8,8,8\nlearning_rate = 1\n").unwrap();
    let o = pqkd(&["train-teacher", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown key"), "{}", stderr(&o));
}

fn rows_per_split(metrics: &Path) -> (usize, usize) {
    let text = std::fs::read_to_string(metrics).unwrap();
    let body: Vec<&str> = text.lines().skip(1).collect();
    (body.iter().filter(|l| l.contains(",train,")).count(), body.iter().filter(|l| l.contains(",val,")).count())
}

#[test]
fn tiny_pqkd_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let o = pqkd(&["train-pqkd", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--dim-theta", "15"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "feature_trace.csv", "student.json", "teacher.json", "summary.json", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert_eq!(rows_per_split(&out.join("metrics.csv")), (3, 3));

    let o = pqkd(&["report", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("accounting:") && text.contains("Lipschitz suite"), "{text}");
    for f in ["accounting.json", "bounds.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("bounds.json"));
}

#[test]
fn report_on_missing_directory_fails() {
    let o = pqkd(&["report", "/no/such/run"]);
    assert!(!o.status.success());
}
