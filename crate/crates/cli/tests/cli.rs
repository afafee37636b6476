use std::path::Path;
use std::process::Command;

use serde_json::Value;

const SCENARIO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/assets/scenarios/wildfire.scenario");
const GOLDEN: &str = include_str!("../../core/assets/golden/wildfire.trace");

fn urgentctl(log: &Path, args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_urgentctl")).arg("--log").arg(log).args(args).output().unwrap();
    (out.status.success(), String::from_utf8(out.stdout).unwrap())
}

#[test]
fn scenario_run_prints_the_golden_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (ok, out) = urgentctl(&dir.path().join("x.log"), &["scenario", "run", SCENARIO, "--trace"]);
    assert!(ok);
    assert_eq!(out, GOLDEN);
}

#[test]
fn saved_scenario_replays_and_compacts() {
    let dir = tempfile::tempdir().unwrap();
    let saved = dir.path().join("run.log");
    let (ok, _) = urgentctl(&dir.path().join("unused.log"), &["scenario", "run", SCENARIO, "--save", saved.to_str().unwrap()]);
    assert!(ok);
    let (ok, out) = urgentctl(&saved, &["replay", saved.to_str().unwrap(), "--trace"]);
    assert!(ok);
    assert_eq!(out, GOLDEN);
    let (ok, _) = urgentctl(&saved, &["compact", saved.to_str().unwrap()]);
    assert!(ok);
    let (ok, out) = urgentctl(&saved, &["replay", saved.to_str().unwrap()]);
    assert!(ok);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["recovery"]["replayed"], 0);
    assert_eq!(v["status"]["actions"], 4);
}

#[test]
fn commands_persist_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ops.log");
    assert!(urgentctl(&log, &["incident", "create", "--id", "fire-02", "--label", "Coast", "--tokens", "5000"]).0);
    assert!(urgentctl(&log, &["source", "register", "--id", "buoy-1", "--incident", "fire-02"]).0);
    let envelope = dir.path().join("env.json");
    std::fs::write(
        &envelope,
        r#"{"source_id":"buoy-1","sequence_number":1,"content_kind":"fire_perimeter","format":"json","payload":"{\"region\":\"coast\",\"cells\":[[1,1]]}"}"#,
    )
    .unwrap();
    assert!(urgentctl(&log, &["ingest", "send", envelope.to_str().unwrap()]).0);
    let (ok, out) = urgentctl(&log, &["ingest", "send", envelope.to_str().unwrap()]);
    assert!(ok);
    assert!(out.contains("duplicate"));
    let (_, out) = urgentctl(&log, &["incident", "list"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["incidents"][0]["incident"]["incident_id"], "fire-02");
    let (_, out) = urgentctl(&log, &["events", "--kind", "sensor_data_arrived"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["events"].as_array().unwrap().len(), 1);
    let (ok, _) = urgentctl(&log, &["command", r#"{"op":"cancel_job","request_id":"nope"}"#]);
    assert!(!ok);
}
