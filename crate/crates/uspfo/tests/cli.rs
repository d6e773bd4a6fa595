use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn uspfo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uspfo")).args(args).output().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.trim_ascii()).unwrap()
}

#[test]
fn flow_writes_report_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let config = fixtures().join("default.json");
    let out = uspfo(&["flow", "--config", config.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["po"], 36);

    let out = uspfo(&["metrics", "--report", report.to_str().unwrap(), "--table"]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("po = 3*theta + 2*phi + zeta"));
    assert!(table.contains("GET /resource/profile"));
}

#[test]
fn ttl_override_is_validated() {
    let config = fixtures().join("default.json");
    let out = uspfo(&["flow", "--config", config.to_str().unwrap(), "--ttl-override", "code=0"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "UsageError");
    let out = uspfo(&["flow", "--config", config.to_str().unwrap(), "--ttl-override", "auth_token=5", "--table"]);
    assert!(out.status.success());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = uspfo(&["teleport"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "UsageError");
    let out = uspfo(&["flow", "--in-process", "--bind", "127.0.0.1:1", "--config", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_reports_json_error() {
    let out = uspfo(&["flow", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "ConfigInvalid");
}

#[test]
fn attack_run_writes_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("attacks.jsonl");
    let out = uspfo(&[
        "attack",
        "run",
        "--fixtures",
        fixtures().to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let lines: Vec<Value> = std::fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 16);
    assert!(lines.iter().all(|l| l["passed"] == true));

    let out = uspfo(&["attack", "run", "--fixtures", fixtures().to_str().unwrap(), "--scenario", "code-replay"]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("PASS code-replay"));

    let out = uspfo(&["attack", "run", "--scenario", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "UnknownScenario");
}

#[test]
fn attack_list_names_every_scenario() {
    let out = uspfo(&["attack", "list"]);
    assert!(out.status.success());
    let names: Vec<String> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["name"].as_str().unwrap().to_string())
        .collect();
    assert!(names.contains(&"rate-limit-flood".to_string()));
    assert_eq!(names.len(), 16);
}

#[test]
fn register_appends_to_registry_file() {
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("registry.json");
    let args = |redirect: &'static str| {
        vec![
            "register".to_string(),
            "--registry".into(),
            registry.to_str().unwrap().into(),
            "--redirect-uri".into(),
            redirect.into(),
            "--assertion-verification-uri".into(),
            "https://assertion.example.org/cert".into(),
        ]
    };
    let run = |a: Vec<String>| Command::new(env!("CARGO_BIN_EXE_uspfo")).args(a).output().unwrap();
    let out = run(args("https://client.example.org/cb"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(record["client_id"].as_str().unwrap().starts_with("UFO_"));
    assert!(run(args("https://client.example.org/second")).status.success());
    let stored: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(&registry).unwrap()).unwrap();
    assert_eq!(stored.len(), 2);

    let out = run(args("http://client.example.org/cb"));
    assert_eq!(out.status.code(), Some(1));
    let mut no_uri = args("https://client.example.org/cb");
    no_uri.truncate(5);
    let out = run(no_uri);
    assert_eq!(stderr_json(&out)["error"], "MissingAssertionUri");
}

#[test]
fn keygen_writes_private_jwks() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("keys.json");
    let out = uspfo(&["keygen", "--out", out_path.to_str().unwrap(), "--key", "a#es256:ES256"]);
    assert!(out.status.success());
    let set: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(set["keys"][0]["kid"], "a#es256");
    assert!(set["keys"][0]["d"].is_string());
    let out = uspfo(&["keygen", "--out", out_path.to_str().unwrap(), "--key", "a:HS256"]);
    assert_eq!(out.status.code(), Some(1));
}
