use std::path::{Path, PathBuf};
use std::process::Command;

use sandbot::commands::{schema_text, SchemaKind};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn sandbot(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sandbot")).args(args).current_dir(root()).output().unwrap()
}

#[test]
fn validate_accepts_shipped_scenarios() {
    for s in ["scenarios/structured_panel.json", "scenarios/unstructured_plate.json"] {
        let out = sandbot(&["validate", "--scenario", s]);
        assert!(out.status.success(), "{s}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn validate_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(root().join("scenarios/unstructured_plate.json")).unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, text.replacen("\"seed\"", "\"sede\"", 1)).unwrap();
    let out = sandbot(&["validate", "--scenario", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
}

#[test]
fn run_with_missing_scenario_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("metrics.json");
    let events = dir.path().join("events.jsonl");
    let out = sandbot(&[
        "run",
        "--scenario",
        "scenarios/missing.json",
        "--headless",
        "--operator",
        "scenarios/structured_panel.script.json",
        "--out",
        out_path.to_str().unwrap(),
        "--events",
        events.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn run_needs_headless_flag() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    let out = sandbot(&[
        "run",
        "--scenario",
        "scenarios/unstructured_plate.json",
        "--operator",
        "scenarios/unstructured_plate.script.json",
        "--out",
        m.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(!m.exists());
}

#[test]
fn demo_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let m = dir.path().join(format!("{name}.json"));
        let e = dir.path().join(format!("{name}.jsonl"));
        let out = sandbot(&[
            "run",
            "--scenario",
            "scenarios/unstructured_plate.json",
            "--headless",
            "--operator",
            "scenarios/unstructured_plate.script.json",
            "--seed",
            "42",
            "--out",
            m.to_str().unwrap(),
            "--events",
            e.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (std::fs::read(m).unwrap(), std::fs::read(e).unwrap())
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    let metrics: serde_json::Value = serde_json::from_slice(&a.0).unwrap();
    assert_eq!(metrics["phase"], "complete");
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let run = |extra: Option<&str>| {
        let m = dir.path().join(format!("{}.json", extra.is_some()));
        let mut args = vec![
            "run",
            "--scenario",
            "crates/cli/tests/fixtures/plate.json",
            "--headless",
            "--operator",
            "crates/cli/tests/fixtures/plate.script.json",
            "--out",
            m.to_str().unwrap(),
        ];
        args.extend(extra);
        let out = sandbot(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(m).unwrap()
    };
    assert_eq!(run(None), run(Some("--sequential")));
}

#[test]
fn ply_dump_has_one_cloud_per_scan() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    let ply = dir.path().join("ply");
    let out = sandbot(&[
        "run",
        "--scenario",
        "crates/cli/tests/fixtures/plate.json",
        "--headless",
        "--operator",
        "crates/cli/tests/fixtures/plate.script.json",
        "--out",
        m.to_str().unwrap(),
        "--ply-dir",
        ply.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(ply.join("scan_01.ply")).unwrap();
    assert!(text.starts_with("ply\nformat ascii 1.0\n"));
}

#[test]
fn published_schemas_match_the_code() {
    for (kind, file) in [
        (SchemaKind::Scenario, "docs/scenario.schema.json"),
        (SchemaKind::Script, "docs/operator_script.schema.json"),
        (SchemaKind::Protocol, "docs/protocol.schema.json"),
    ] {
        let published = std::fs::read_to_string(root().join(file)).unwrap_or_default();
        assert_eq!(published.trim_end(), schema_text(kind).trim_end(), "{file} is stale; regenerate with `sandbot schema`");
    }
}

#[test]
fn scenario_round_trips_through_json() {
    use sandbot_core::scenario::Scenario;
    for s in ["scenarios/structured_panel.json", "scenarios/unstructured_plate.json"] {
        let a = Scenario::from_path(&root().join(s)).unwrap();
        let b = Scenario::from_json_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
