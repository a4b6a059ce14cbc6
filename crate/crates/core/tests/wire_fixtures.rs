use std::path::Path;

use moma_core::service::WireMessage;

#[test]
fn message_fixtures_round_trip_byte_for_byte() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/messages");
    let mut kinds = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let line = text.strip_suffix('\n').unwrap();
        let msg = WireMessage::parse(line).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(msg.to_json(), line, "{}", path.display());
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let kind = v["type"].as_str().unwrap().to_owned();
        let prefix = format!(r#"{{"type":"{kind}","schema_version":1,"#);
        assert!(line.starts_with(&prefix), "{}", path.display());
        kinds.push(kind);
    }
    kinds.sort();
    kinds.dedup();
    assert_eq!(kinds, ["error", "signal", "state", "world"]);
}
