//! WebSocket session host.
//!
//! One task per connection reads client frames and posts signals into the
//! mailbox; the tick loop owns the [`Session`], drains the mailbox once per
//! tick and broadcasts the resulting state to every connection. The first
//! connection to arrive is the operator; later ones only observe until the
//! operator leaves.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use moma_core::service::{Mailbox, Session, SessionConfig, WireMessage};
use moma_core::simulator::record::DemonstrationRecord;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast;
use tokio_tungstenite::tungstenite::Message;

use crate::{CliError, SimArgs, EXIT_OK};

struct Shared {
    mailbox: Mailbox,
    operator_taken: AtomicBool,
    world_operator: String,
    world_observer: String,
}

pub fn cmd_sim(args: &SimArgs) -> Result<i32, CliError> {
    let cfg = args.session_config()?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start runtime: {e}")))?;
    let rec = rt.block_on(serve(cfg.clone(), args.max_ticks, |addr| {
        println!("listening on ws://{addr}");
        let _ = std::io::stdout().flush();
    }))?;
    if let Some(path) = &cfg.record {
        rec.write(path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        eprintln!("wrote {} rows to {}", rec.rows.len(), path.display());
    }
    Ok(EXIT_OK)
}

/// Runs a session until `max_ticks` ticks have elapsed or Ctrl-C, and
/// returns its record. `on_listen` is called once the socket is bound.
pub async fn serve(
    cfg: SessionConfig,
    max_ticks: Option<u64>,
    on_listen: impl FnOnce(std::net::SocketAddr),
) -> Result<DemonstrationRecord, CliError> {
    let mut session = Session::new(cfg.clone()).map_err(|e| CliError::Input(e.to_string()))?;
    let addr = format!("{}:{}", cfg.listen, cfg.port);
    let listener =
        TcpListener::bind(&addr).await.map_err(|e| CliError::Runtime(format!("cannot listen on {addr}: {e}")))?;
    let local = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
    let (states, _) = broadcast::channel(64);
    let shared = Arc::new(Shared {
        mailbox: Mailbox::new(),
        operator_taken: AtomicBool::new(false),
        world_operator: session.world_message(true).to_json(),
        world_observer: session.world_message(false).to_json(),
    });
    on_listen(local);

    // Connections only hold receivers, so they see the channel close once
    // the tick loop and the acceptor are gone.
    let acceptor = {
        let shared = shared.clone();
        let states = states.clone();
        tokio::spawn(async move {
            while let Ok((stream, _)) = listener.accept().await {
                tokio::spawn(connection(stream, shared.clone(), states.subscribe()));
            }
        })
    };

    let mut interval = tokio::time::interval(Duration::from_secs_f64(1.0 / cfg.tick_rate));
    let mut ticks = 0u64;
    let ctrl_c = tokio::signal::ctrl_c();
    tokio::pin!(ctrl_c);
    loop {
        tokio::select! {
            _ = interval.tick() => {}
            _ = &mut ctrl_c => break,
        }
        if max_ticks.is_some_and(|m| ticks >= m) {
            break;
        }
        let state = session.tick(shared.mailbox.take());
        // No receivers is fine.
        let _ = states.send(state.to_json().into());
        ticks += 1;
    }
    acceptor.abort();
    drop(states);
    Ok(session.record())
}

/// Reply to one client text frame, if any.
fn handle_text(text: &str, operator: bool, shared: &Shared) -> Option<String> {
    match WireMessage::parse(text) {
        Err(e) => Some(WireMessage::error(e).to_json()),
        Ok(WireMessage::Signal(s)) if operator => {
            // Stale or duplicate sequence numbers are dropped silently.
            shared.mailbox.post(s);
            None
        }
        Ok(WireMessage::Signal(_)) => Some(WireMessage::error("observer connections cannot send signals").to_json()),
        Ok(_) => Some(WireMessage::error("only `signal` messages are accepted from clients").to_json()),
    }
}

async fn connection(stream: TcpStream, shared: Arc<Shared>, mut states: broadcast::Receiver<Arc<str>>) {
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else {
        return;
    };
    let (mut tx, mut rx) = ws.split();
    let operator = shared.operator_taken.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_ok();
    if operator {
        shared.mailbox.reset();
    }
    let world = if operator { &shared.world_operator } else { &shared.world_observer };
    if tx.send(Message::text(world.as_str())).await.is_ok() {
        loop {
            tokio::select! {
                frame = rx.next() => {
                    let reply = match frame {
                        Some(Ok(Message::Text(t))) => handle_text(t.as_str(), operator, &shared),
                        Some(Ok(Message::Binary(_))) => Some(WireMessage::error("parse error: binary frames are not supported").to_json()),
                        Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                        Some(Ok(_)) => None,
                    };
                    if let Some(r) = reply {
                        if tx.send(Message::text(r)).await.is_err() {
                            break;
                        }
                    }
                }
                state = states.recv() => match state {
                    Ok(s) => {
                        if tx.send(Message::text(s.as_ref())).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => {}
                    Err(broadcast::error::RecvError::Closed) => {
                        let _ = tx.send(Message::Close(None)).await;
                        break;
                    }
                },
            }
        }
    }
    if operator {
        shared.mailbox.reset();
        shared.operator_taken.store(false, Ordering::SeqCst);
    }
}
