//! The example messages under `docs/protocol` are what the cockpit is built
//! against; they must decode into the wire types and encode back unchanged.

use dmpd_sim::{ClientCommand, ServerMessage, SCHEMA_VERSION};
use serde_json::Value;

fn examples(name: &str) -> Vec<Value> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/protocol/").to_string() + name;
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn server_examples_round_trip() {
    let all = examples("server.examples.jsonl");
    assert!(all.len() >= 10);
    for v in all {
        let msg: ServerMessage = serde_json::from_value(v.clone()).unwrap_or_else(|e| panic!("{v}: {e}"));
        assert_eq!(msg.schema_version, SCHEMA_VERSION);
        assert_eq!(serde_json::to_value(&msg).unwrap(), v);
    }
}

#[test]
fn client_examples_round_trip() {
    for v in examples("client.examples.jsonl") {
        let cmd: ClientCommand = serde_json::from_value(v.clone()).unwrap_or_else(|e| panic!("{v}: {e}"));
        assert_eq!(serde_json::to_value(cmd).unwrap(), v);
    }
}

#[test]
fn schema_file_names_every_event() {
    let schema: Value =
        serde_json::from_str(include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/protocol/schema.json"))).unwrap();
    let text = schema.to_string();
    for event in ["hello", "ack", "error", "merge_complete", "collision", "trial_end", "paused", "resumed", "reset"] {
        assert!(text.contains(&format!("\"{event}\"")), "schema lacks {event}");
    }
    for kind in ["set_yield", "set_gap_target", "pause", "resume"] {
        assert!(text.contains(&format!("\"{kind}\"")), "schema lacks {kind}");
    }
}
