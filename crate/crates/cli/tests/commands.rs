use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moma_core::imitation::TpGmm;
use moma_core::simulator::record::DemonstrationRecord;
use moma_core::simulator::world::World;
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).display().to_string()
}

fn moma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moma")).args(args).env_remove("MOMA_CONFIG").output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn run_bundled_corridor_script_succeeds() {
    let o = moma(&["run", &fx("worlds/corridor.json"), &fx("scripts/corridor.jsonl")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o);
    assert_eq!(r["success"], true);
    assert_eq!(r["collisions"], 0);
}

#[test]
fn run_truncated_script_is_a_task_failure() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fx("scripts/corridor.jsonl")).unwrap();
    let short: String = text.lines().take(200).map(|l| format!("{l}\n")).collect();
    let script = dir.path().join("short.jsonl");
    std::fs::write(&script, short).unwrap();
    let o = moma(&["run", "corridor", script.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout_json(&o)["success"], false);
}

#[test]
fn replay_bundled_records_is_exact() {
    for name in ["clean_table", "door", "corridor"] {
        let o = moma(&["replay", &fx(&format!("records/{name}.jsonl"))]);
        assert_eq!(o.status.code(), Some(0), "{name}");
        let r = stdout_json(&o);
        assert!(r["max_position_deviation"].as_f64().unwrap() < 1e-6);
        assert!(r["max_orientation_deviation"].as_f64().unwrap() < 1e-6);
    }
}

#[test]
fn replay_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = DemonstrationRecord::read(fx("records/door.jsonl")).unwrap();
    rec.rows[100].ee.position.x += 1e-3;
    let p = dir.path().join("tampered.jsonl");
    rec.write(&p).unwrap();
    let o = moma(&["replay", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fit_with_one_demo_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.json");
    let o = moma(&["fit", &fx("demos/clean_table_0.jsonl"), "--task", &fx("tasks/clean_table_ee.json"), "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("≥ 2 demos required"));
    assert!(!out.exists());
}

#[test]
fn fit_reproduces_bundled_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.json");
    let demos: Vec<String> = (0..5).map(|i| fx(&format!("demos/clean_table_{i}.jsonl"))).collect();
    let mut args = vec!["fit"];
    args.extend(demos.iter().map(String::as_str));
    let task = fx("tasks/clean_table_whole_body.json");
    args.extend(["--task", &task, "-o", out.to_str().unwrap()]);
    let o = moma(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["segments"].as_array().unwrap().len(), 3);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(fx("models/clean_table_whole_body.json")).unwrap());
    TpGmm::load(&out).unwrap();
}

#[test]
fn rollout_exit_codes_follow_the_task_outcome() {
    let model = fx("models/clean_table_whole_body.json");
    let o = moma(&["rollout", &model, &fx("worlds/clean_table.json"), "--policy", "whole-body"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let r = stdout_json(&o);
    assert_eq!(r["policy"], "whole-body");
    assert!(r["base_deviation"].is_number());

    let dir = tempfile::tempdir().unwrap();
    let raised = World::from_file(fx("worlds/clean_table.json"))
        .unwrap()
        .with_frame_translated("table", moma_core::geometry::Vec3::new(0.0, 0.0, 0.4))
        .unwrap();
    let wp = dir.path().join("raised.json");
    std::fs::write(&wp, raised.to_json_pretty()).unwrap();
    let o = moma(&["rollout", &model, wp.to_str().unwrap(), "--policy", "whole-body"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout_json(&o)["success"], false);
    let o = moma(&["rollout", &fx("models/clean_table_ee.json"), wp.to_str().unwrap(), "--policy", "ee-agent"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn whole_body_policy_needs_a_whole_body_model() {
    let o = moma(&["rollout", &fx("models/clean_table_ee.json"), "clean_table", "--policy", "whole-body"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_bundled_suite() {
    let o = moma(&["eval", &fx("suites/acceptance.json")]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{table}");
    assert!(table.starts_with("case"));
    assert!(table.contains("15/15 cases as expected"));
}

#[test]
fn eval_reports_unexpected_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let suite = serde_json::json!({
        "schema_version": 1,
        "cases": [
            {"name": "corridor", "kind": "run", "world": "corridor", "script": fx("scripts/corridor.jsonl")},
            {"name": "wrong world", "kind": "run", "world": "door", "script": fx("scripts/corridor.jsonl")},
            {"name": "missing", "kind": "replay", "record": "nope.jsonl"}
        ]
    });
    let p = dir.path().join("s.json");
    std::fs::write(&p, suite.to_string()).unwrap();
    let o = moma(&["eval", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("1/3 cases as expected"), "{table}");
    assert!(table.contains("error"));
}

#[test]
fn usage_errors_exit_2() {
    for args in [&["teleport"][..], &["run", "--bogus"], &["rollout", "m.json", "w.json", "--policy", "fly"], &[]] {
        let o = moma(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
    let o = moma(&["run", "/no/such/world.json", "/no/such/script.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(moma(&["--help"]).status.code(), Some(0));
}

#[test]
fn bundled_fixtures_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let files = moma_cli::fixtures::generate(dir.path()).unwrap();
    assert!(!files.is_empty());
    for f in &files {
        let rel = f.strip_prefix(dir.path()).unwrap();
        let bundled = fixtures().join(rel);
        let same = std::fs::read(f).unwrap() == std::fs::read(&bundled).unwrap_or_default();
        assert!(same, "{} differs from the bundled copy", rel.display());
    }
}
