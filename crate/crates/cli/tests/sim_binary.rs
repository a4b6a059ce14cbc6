use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};

use moma_core::simulator::record::{replay, DemonstrationRecord};

fn moma() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_moma"));
    c.env_remove("MOMA_CONFIG");
    c
}

#[test]
fn sim_prints_address_and_writes_record() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("session.jsonl");
    let mut child = moma()
        .args(["sim", "--world", "door", "--port", "0", "--tick-rate", "200", "--max-ticks", "40", "--record"])
        .arg(&rec)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    assert!(line.starts_with("listening on ws://127.0.0.1:"), "{line}");
    assert!(child.wait().unwrap().success());
    let r = DemonstrationRecord::read(&rec).unwrap();
    assert_eq!(r.rows.len(), 40);
    assert_eq!(r.header.world.name, "door");
    assert!(replay(&r).unwrap().max_pose_deviation() < 1e-6);
}

#[test]
fn port_in_use_is_a_startup_error() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let o = moma().args(["sim", "--port", &port, "--max-ticks", "5"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot listen"));
}

#[test]
fn config_comes_from_env_unless_given_explicitly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"tick_rate": 1000}"#).unwrap();
    let good = dir.path().join("good.json");
    std::fs::write(&good, r#"{"world": "corridor", "port": 0, "tick_rate": 200}"#).unwrap();
    let o = moma().args(["sim", "--max-ticks", "3"]).env("MOMA_CONFIG", &bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tick rate"));
    let o = moma().args(["sim", "--max-ticks", "3", "--config"]).arg(&good).env("MOMA_CONFIG", &bad).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}
