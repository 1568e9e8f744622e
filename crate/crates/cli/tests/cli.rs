use std::path::Path;
use std::process::{Command, Output};

fn seclambda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seclambda")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn record_and_build(dir: &Path) -> std::path::PathBuf {
    let traces = dir.join("traces");
    let out = seclambda(&["simulate", "--app", "photo", "--mode", "record", "--requests", "12", "--out", p(&traces)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let policy = dir.join("policy.json");
    let out = seclambda(&["graph", "build", "--traces", p(&traces), "--app", "photo", "--out", p(&policy)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    policy
}

#[test]
fn record_writes_one_log_per_request() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t");
    let out = seclambda(&["simulate", "--app", "mapreduce", "--mode", "record", "--requests", "3", "--out", p(&traces)]);
    assert!(out.status.success());
    let logs = std::fs::read_dir(&traces)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "jsonl"))
        .count();
    assert_eq!(logs, 3);
    assert!(traces.join("summary.json").exists());
}

#[test]
fn build_is_deterministic_and_enforce_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let policy = record_and_build(dir.path());
    let again = dir.path().join("again.json");
    let out = seclambda(&["graph", "build", "--traces", p(&dir.path().join("traces")), "--app", "photo", "--out", p(&again)]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&policy).unwrap(), std::fs::read(&again).unwrap());

    let en = dir.path().join("en");
    let out = seclambda(&["simulate", "--app", "photo", "--mode", "enforce", "--policy", p(&policy), "--requests", "12", "--out", p(&en)]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(en.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["denials"], 0);
    assert!(std::fs::read_to_string(en.join("decisions.jsonl")).unwrap().lines().count() > 0);
}

#[test]
fn build_rejects_empty_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = seclambda(&["graph", "build", "--traces", p(dir.path()), "--out", p(&dir.path().join("x.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inspect_dot_matches_json() {
    let dir = tempfile::tempdir().unwrap();
    let policy = record_and_build(dir.path());
    let dot = dir.path().join("g.dot");
    let out = seclambda(&["graph", "inspect", p(&policy), "--dot", p(&dot)]);
    assert!(out.status.success());
    let set: serde_json::Value = serde_json::from_slice(&std::fs::read(&policy).unwrap()).unwrap();
    let json_nodes: usize = set["local"].as_object().unwrap().values().map(|g| g["nodes"].as_array().unwrap().len()).sum();
    let dot = std::fs::read_to_string(&dot).unwrap();
    let dot_nodes = dot.lines().filter(|l| l.trim_start().starts_with('n') && l.contains("[shape=")).count();
    assert_eq!(dot_nodes, json_nodes);
    assert_eq!(seclambda(&["graph", "inspect", p(&dir.path().join("missing.json"))]).status.code(), Some(1));
}

#[test]
fn attack_exit_codes() {
    for scenario in ["exfiltrate", "repeat", "bypass", "out-of-order"] {
        let out = seclambda(&["attack", "--scenario", scenario]);
        assert_eq!(out.status.code(), Some(0), "{scenario}: {}", String::from_utf8_lossy(&out.stderr));
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(report["detected"], true);
    }
    let out = seclambda(&["attack", "--app", "pipeline", "--scenario", "bypass", "--function", "CreateChangeSet"]);
    assert_eq!(out.status.code(), Some(0));
    // One repetition is what the function does anyway.
    let out = seclambda(&["attack", "--scenario", "repeat", "--times", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_and_bench() {
    let out = seclambda(&["eval", "--app", "constant", "--rounds", "4"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "n,errors\n0,4\n1,0\n2,0\n3,0\n4,0\n");
    let out = seclambda(&["bench", "--nodes", "100", "--iters", "100"]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("100 checks on a 100-node chain"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(seclambda(&["nope"]).status.code(), Some(1));
    assert_eq!(seclambda(&["simulate", "--app", "photo"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = seclambda(&["simulate", "--app", "photo", "--mode", "enforce", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(seclambda(&["eval", "--app", "no-such-app"]).status.code(), Some(1));
}

#[test]
fn controller_needs_an_address() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tenant.json");
    std::fs::write(&cfg, r#"{"applications":[{"name":"a","functions":["f"]}]}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_seclambda"))
        .args(["controller", "run", "--config", p(&cfg)])
        .env_remove("SECLAMBDA_CONTROLLER")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    assert_eq!(seclambda(&["controller", "run", "--config", p(&bad), "--listen", "127.0.0.1:0"]).status.code(), Some(1));
}
