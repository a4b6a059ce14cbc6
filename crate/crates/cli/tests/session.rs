use std::net::SocketAddr;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use moma_core::service::{Interface, SessionConfig, WireMessage};
use moma_core::simulator::record::{replay, DemonstrationRecord};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn config() -> SessionConfig {
    SessionConfig { world: "corridor".into(), port: 0, tick_rate: 100.0, interface: Interface::Scripted, ..SessionConfig::default() }
}

async fn start(ticks: u64) -> (SocketAddr, tokio::task::JoinHandle<DemonstrationRecord>) {
    let (tx, rx) = oneshot::channel();
    let h = tokio::spawn(async move {
        moma_cli::server::serve(config(), Some(ticks), move |a| {
            tx.send(a).unwrap();
        })
        .await
        .unwrap()
    });
    (rx.await.unwrap(), h)
}

async fn connect(addr: SocketAddr) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}")).await.unwrap().0
}

async fn next_json(ws: &mut Ws) -> Option<Value> {
    loop {
        match tokio::time::timeout(Duration::from_secs(10), ws.next()).await.ok()?? {
            Ok(Message::Text(t)) => {
                WireMessage::parse(t.as_str()).unwrap();
                return Some(serde_json::from_str(t.as_str()).unwrap());
            }
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => {}
        }
    }
}

async fn next_of(ws: &mut Ws, kind: &str) -> Value {
    loop {
        let v = next_json(ws).await.expect("connection open");
        if v["type"] == kind {
            return v;
        }
    }
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::text(v.to_string())).await.unwrap();
}

fn signal(seq: u64) -> Value {
    json!({"type": "signal", "schema_version": 1, "seq": seq, "t_client": 0.0, "v": [1.0, 0.0, 0.0], "deadman": true})
}

#[tokio::test(flavor = "multi_thread")]
async fn world_first_then_states_and_no_motion_without_signals() {
    let (addr, h) = start(60).await;
    let mut ws = connect(addr).await;
    let world = next_json(&mut ws).await.unwrap();
    assert_eq!(world["type"], "world");
    assert_eq!(world["operator"], true);
    assert_eq!(world["schema_version"], 1);
    let first = next_of(&mut ws, "state").await;
    let mut last = first.clone();
    while let Some(v) = next_json(&mut ws).await {
        assert!(v["tick"].as_u64() > last["tick"].as_u64());
        last = v;
    }
    assert_eq!(first["base"], last["base"]);
    assert_eq!(first["arm"], last["arm"]);
    let rec = h.await.unwrap();
    assert_eq!(rec.rows.len(), 60);
    assert!(rec.rows.iter().all(|r| !r.signal.active));
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_and_unknown_messages_get_error_replies() {
    let (addr, h) = start(100).await;
    let mut ws = connect(addr).await;
    next_of(&mut ws, "world").await;
    ws.send(Message::text("{not json")).await.unwrap();
    let e = next_of(&mut ws, "error").await;
    assert!(e["message"].as_str().unwrap().contains("parse"));
    send(&mut ws, json!({"type": "teleport", "schema_version": 1})).await;
    let e = next_of(&mut ws, "error").await;
    assert!(e["message"].as_str().unwrap().contains("unknown message type"));
    // The connection stays usable.
    next_of(&mut ws, "state").await;
    drop(ws);
    h.await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn single_signal_moves_for_at_most_three_ticks() {
    let (addr, h) = start(80).await;
    let mut ws = connect(addr).await;
    next_of(&mut ws, "state").await;
    let mut sig = signal(1);
    sig["unknown_field"] = json!("ignored");
    send(&mut ws, sig).await;
    // A replayed older sequence number is dropped.
    next_of(&mut ws, "state").await;
    send(&mut ws, signal(1)).await;
    let rec = h.await.unwrap();
    let active: Vec<usize> = rec.rows.iter().enumerate().filter(|(_, r)| r.signal.active).map(|(i, _)| i).collect();
    assert!(!active.is_empty() && active.len() <= 3, "{active:?}");
    assert_eq!(active.last().unwrap() - active[0] + 1, active.len());
    assert!(rec.rows.last().unwrap().ee.position.x > rec.rows[0].ee.position.x);
    assert!(replay(&rec).unwrap().max_pose_deviation() < 1e-6);
}

#[tokio::test(flavor = "multi_thread")]
async fn later_connections_observe() {
    let (addr, h) = start(100).await;
    let mut op = connect(addr).await;
    assert_eq!(next_of(&mut op, "world").await["operator"], true);
    let mut obs = connect(addr).await;
    assert_eq!(next_of(&mut obs, "world").await["operator"], false);
    send(&mut obs, signal(1)).await;
    let e = next_of(&mut obs, "error").await;
    assert!(e["message"].as_str().unwrap().contains("observer"));
    next_of(&mut obs, "state").await;
    drop(op);
    drop(obs);
    let rec = h.await.unwrap();
    assert!(rec.rows.iter().all(|r| !r.signal.active));
}
