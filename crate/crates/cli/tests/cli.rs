use std::path::Path;
use std::process::{Command, Output};

fn opzo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opzo")).args(args).output().expect("spawn opzo")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn cost_model_prints_table() {
    let o = opzo(&["cost-model", "--n", "800", "--m", "10", "--layers", "2"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for (method, ops) in [("bp_sg", "648000"), ("dfa*", "16000"), ("zo_sp*", "1600"), ("opzo*", "16000")] {
        let line = out.lines().find(|l| l.starts_with(method)).unwrap_or_else(|| panic!("{method} missing:\n{out}"));
        assert!(line.trim_end().ends_with(ops), "{line}");
    }
    assert!(stderr(&o).is_empty());
}

#[test]
fn cost_model_warns_on_wide_output() {
    let o = opzo(&["cost-model", "--n", "10", "--m", "10", "--layers", "2"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn cost_model_rejects_zero() {
    let o = opzo(&["cost-model", "--n", "0", "--m", "10", "--layers", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn verify_fast_suites_pass() {
    for suite in ["fd", "oracle_eq"] {
        let o = opzo(&["verify", "--suite", suite]);
        assert!(o.status.success(), "{}", stdout(&o));
        assert!(stdout(&o).lines().all(|l| l.contains("PASS")));
    }
}

#[test]
fn verify_rejects_unknown_suite() {
    assert!(!opzo(&["verify", "--suite", "nope"]).status.success());
}

#[test]
fn init_config_round_trips_through_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let o = opzo(&["init-config", "--preset", "clusters-smoke", "--engine", "dfa", "--seed", "5"]);
    assert!(o.status.success());
    std::fs::write(&cfg, &o.stdout).unwrap();

    let out = dir.path().join("run");
    let o = opzo(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("final test accuracy"));
    for f in ["record.json", "config.json", "config.input.json", "metrics.csv", "epochs.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let record: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("record.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["engine"], "dfa");
    assert_eq!(record["seed"], 5);

    let o = opzo(&["compare", "--runs", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("dfa"));

    let o = opzo(&["profile-efficiency", "--runs", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("synops/sample"));
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = opzo(&["init-config", "--preset", "clusters-smoke"]);
    let mut v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    v["learning_rate"] = serde_json::json!(0.1);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = opzo(&["train", "--config", cfg.to_str().unwrap(), "--quiet"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn invalid_config_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = opzo(&["init-config", "--preset", "clusters-smoke"]);
    let mut v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    v["batch_size"] = serde_json::json!(0);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = opzo(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
}

#[test]
fn compare_with_missing_record_fails() {
    let missing = Path::new("/nonexistent/run");
    let o = opzo(&["compare", "--runs", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing run record"), "{}", stderr(&o));
}
