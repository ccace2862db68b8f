//! Websocket front end. A dedicated thread owns the [`Session`] and steps it
//! at `dt / realtime_factor`; connections exchange messages with it through
//! queues.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use serde::Deserialize;
use tokio::sync::{mpsc, watch};

use crate::protocol::{Body, ClientCommand, Event, ServerMessage, SCHEMA_VERSION};
use crate::session::Session;

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub host: String,
    pub port: u16,
    /// Path of the live channel.
    pub path: String,
    pub realtime_factor: f64,
    /// Serve the cockpit bundle from this directory at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, path: "/ws".into(), realtime_factor: 1.0, static_dir: None }
    }
}

enum Ingress {
    Connect { id: u64, tx: mpsc::UnboundedSender<String> },
    Command { id: u64, cmd: ClientCommand },
    Malformed { id: u64, error: String },
    Disconnect { id: u64 },
}

#[derive(Clone)]
struct AppState {
    ingress: mpsc::UnboundedSender<Ingress>,
    next_id: Arc<AtomicU64>,
    closing: watch::Receiver<bool>,
}

#[derive(Deserialize)]
struct ConnectQuery {
    schema_version: Option<u32>,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    closing: watch::Sender<bool>,
    stop: Arc<AtomicBool>,
    server: tokio::task::JoinHandle<std::io::Result<()>>,
    sim: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    /// Stops the simulation, closes every connection and waits for both.
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(sim) = self.sim.take() {
            tokio::task::spawn_blocking(move || sim.join()).await.map_err(std::io::Error::other)?.ok();
        }
        let _ = self.closing.send(true);
        (&mut self.server).await.map_err(std::io::Error::other)?
    }

    /// Runs until the server task ends.
    pub async fn wait(mut self) -> std::io::Result<()> {
        (&mut self.server).await.map_err(std::io::Error::other)?
    }
}

/// Binds the endpoint and starts the simulation loop.
pub async fn start(session: Session, opts: ServeOptions) -> std::io::Result<ServerHandle> {
    if !(opts.realtime_factor > 0.0 && opts.realtime_factor.is_finite()) {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "realtime factor must be positive"));
    }
    let (ingress, rx) = mpsc::unbounded_channel();
    let period = Duration::from_secs_f64(session.episode().config.dt / opts.realtime_factor);
    let stop = Arc::new(AtomicBool::new(false));
    let sim_stop = stop.clone();
    let sim = std::thread::Builder::new().name("sim".into()).spawn(move || sim_loop(session, rx, period, &sim_stop))?;

    let (closing, closing_rx) = watch::channel(false);
    let state = AppState { ingress, next_id: Arc::new(AtomicU64::new(0)), closing: closing_rx.clone() };
    let mut app = Router::new().route(&opts.path, get(ws_handler)).with_state(state);
    if let Some(dir) = &opts.static_dir {
        app = app.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    let listener = tokio::net::TcpListener::bind((opts.host.as_str(), opts.port)).await?;
    let addr = listener.local_addr()?;
    let mut rx = closing_rx;
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = rx.wait_for(|&c| c).await;
            })
            .await
    });
    Ok(ServerHandle { addr, closing, stop, server, sim: Some(sim) })
}

async fn ws_handler(ws: WebSocketUpgrade, Query(q): Query<ConnectQuery>, State(st): State<AppState>) -> Response {
    if let Some(v) = q.schema_version {
        if v != SCHEMA_VERSION {
            return (StatusCode::BAD_REQUEST, format!("unsupported schema version {v}; server speaks {SCHEMA_VERSION}"))
                .into_response();
        }
    }
    ws.on_upgrade(move |socket| client(socket, st))
}

async fn client(socket: WebSocket, mut st: AppState) {
    let id = st.next_id.fetch_add(1, Ordering::Relaxed);
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    if st.ingress.send(Ingress::Connect { id, tx }).is_err() {
        return;
    }
    let (mut sink, mut stream) = socket.split();
    let mut writer = tokio::spawn(async move {
        while let Some(text) = rx.recv().await {
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    loop {
        // the writer ends when the simulation drops this client
        let msg = tokio::select! {
            msg = stream.next() => msg,
            _ = &mut writer => break,
            _ = st.closing.wait_for(|&c| c) => break,
        };
        let Some(Ok(msg)) = msg else { break };
        let item = match msg {
            Message::Text(text) => match serde_json::from_str::<ClientCommand>(&text) {
                Ok(cmd) => Ingress::Command { id, cmd },
                Err(e) => Ingress::Malformed { id, error: e.to_string() },
            },
            Message::Close(_) => break,
            _ => continue,
        };
        if st.ingress.send(item).is_err() {
            break;
        }
    }
    let _ = st.ingress.send(Ingress::Disconnect { id });
    writer.abort();
}

/// Single writer over the world state. Commands are drained once per step,
/// so every step sees either the old or the new parameters.
fn sim_loop(mut session: Session, mut rx: mpsc::UnboundedReceiver<Ingress>, period: Duration, stop: &AtomicBool) {
    let mut clients: BTreeMap<u64, mpsc::UnboundedSender<String>> = BTreeMap::new();
    let mut controller: Option<u64> = None;
    let broadcast = |clients: &mut BTreeMap<u64, mpsc::UnboundedSender<String>>, msgs: &[ServerMessage]| {
        for m in msgs {
            let text = m.to_json();
            clients.retain(|_, tx| tx.send(text.clone()).is_ok());
        }
    };
    let error = |session: &Session, message: String| {
        ServerMessage::new(session.episode().time(), session.episode().steps(), Body::Event(Event::Error { message }))
    };
    let mut next = Instant::now();
    while !stop.load(Ordering::Relaxed) {
        loop {
            let item = match rx.try_recv() {
                Ok(item) => item,
                Err(mpsc::error::TryRecvError::Empty) => break,
                Err(mpsc::error::TryRecvError::Disconnected) => return,
            };
            match item {
                Ingress::Connect { id, tx } => {
                    let controlling = controller.is_none();
                    if controlling {
                        controller = Some(id);
                    }
                    let mut hello = vec![session.hello(controlling)];
                    hello.extend(session.snapshot());
                    if hello.iter().all(|m| tx.send(m.to_json()).is_ok()) {
                        clients.insert(id, tx);
                    }
                }
                Ingress::Command { id, cmd } => {
                    let reply = if controller != Some(id) {
                        Err("another client controls the traffic vehicles".to_string())
                    } else {
                        session.apply(cmd)
                    };
                    match reply {
                        Ok(msgs) => broadcast(&mut clients, &msgs),
                        Err(e) => {
                            if let Some(tx) = clients.get(&id) {
                                let _ = tx.send(error(&session, e).to_json());
                            }
                        }
                    }
                }
                Ingress::Malformed { id, error: e } => {
                    if let Some(tx) = clients.get(&id) {
                        let _ = tx.send(error(&session, format!("malformed command: {e}")).to_json());
                    }
                }
                Ingress::Disconnect { id } => {
                    clients.remove(&id);
                    if controller == Some(id) {
                        controller = None;
                        let msgs = session.release_overrides();
                        broadcast(&mut clients, &msgs);
                    }
                }
            }
        }
        match session.tick() {
            Ok(msgs) => broadcast(&mut clients, &msgs),
            Err(e) => {
                let msg = error(&session, format!("trace write failed: {e}"));
                broadcast(&mut clients, &[msg]);
            }
        }
        next += period;
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        } else {
            next = now;
        }
    }
}
