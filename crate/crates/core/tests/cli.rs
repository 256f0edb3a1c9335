use std::fs;
use std::process::{Command, Output};

fn zooadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zooadapt")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = zooadapt(&["select", "m.json", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]: "));
}

#[test]
fn help_exits_zero() {
    assert_eq!(zooadapt(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_manifest_reports_kind_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nope.json");
    let o = zooadapt(&["estimate", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(err.starts_with("error[io]: ") || err.starts_with("error[missing-file]: "), "{err}");
}

#[test]
fn malformed_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    fs::write(&path, "{\"version\": 1").unwrap();
    let o = zooadapt(&["estimate", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error["));
}

#[test]
fn scenario_then_estimate_writes_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    assert!(zooadapt(&["scenario", &p("s.json"), "--seed", "5"]).status.success());
    fs::write(p("archs.json"), r#"[{"name":"id","kind":"identity","seed":0}]"#).unwrap();
    let built = zooadapt(&["build", &p("s.json"), &p("zoo"), "--archs", &p("archs.json")]);
    assert!(built.status.success(), "{}", stderr(&built));
    let o = zooadapt(&["estimate", &p("zoo/manifest.json")]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("model_id,"));
    // 3 domains x 1 arch x 2 configs
    assert_eq!(out.lines().count(), 7);
}
