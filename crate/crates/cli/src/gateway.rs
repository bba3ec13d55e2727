//! Websocket gateway: one operator connection, one execution loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use anyhow::Context;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use sandbot_core::driver::{DriverInput, Driver};
use sandbot_core::session::{Phase, Session};
use tokio::sync::{mpsc, oneshot};

use crate::journal::{line_input, JournalLine};
use crate::protocol::{
    ClientEnvelope, ClientMessage, ErrorCode, InboundValidator, ServerEnvelope, ServerMessage, PROTOCOL_VERSION,
};
use crate::render::render_view;

#[derive(Clone, Debug)]
pub struct GatewayConfig {
    pub session_id: String,
    /// Client traffic journal for replay.
    pub record: Option<PathBuf>,
    /// Event log, JSON lines, written as the session runs.
    pub events: Option<PathBuf>,
    /// Steps between snapshots while executing.
    pub snapshot_every: u64,
    /// Simulated seconds per wall-clock second; 0 runs unpaced.
    pub pace: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig { session_id: "sandbot".into(), record: None, events: None, snapshot_every: 2, pace: 1.0 }
    }
}

enum LoopEvent {
    Connect { conn: u64, tx: mpsc::UnboundedSender<ServerMessage> },
    Disconnect { conn: u64 },
    Message { env: ClientEnvelope, tx: mpsc::UnboundedSender<ServerMessage> },
}

struct Shared {
    session_id: String,
    inbound: mpsc::UnboundedSender<LoopEvent>,
    connected: AtomicBool,
    next_conn: AtomicU64,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    worker: JoinHandle<anyhow::Result<Session>>,
    shutdown: oneshot::Sender<()>,
    server: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl ServerHandle {
    /// Stops the loop, closes the listener and returns the final session.
    pub async fn shutdown(self) -> anyhow::Result<Session> {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.shutdown.send(());
        let session = tokio::task::spawn_blocking(move || self.worker.join())
            .await?
            .map_err(|_| anyhow::anyhow!("execution loop panicked"))??;
        self.server.await??;
        Ok(session)
    }
}

pub async fn serve(session: Session, bind: SocketAddr, config: GatewayConfig) -> anyhow::Result<ServerHandle> {
    let listener = tokio::net::TcpListener::bind(bind).await.with_context(|| format!("bind {bind}"))?;
    let addr = listener.local_addr()?;
    let (inbound, rx) = mpsc::unbounded_channel();
    let stop = Arc::new(AtomicBool::new(false));
    let worker = {
        let stop = Arc::clone(&stop);
        let config = config.clone();
        std::thread::Builder::new()
            .name("execution-loop".into())
            .spawn(move || run_loop(Driver::new(session), rx, &stop, &config))?
    };
    let shared = Arc::new(Shared {
        session_id: config.session_id,
        inbound,
        connected: AtomicBool::new(false),
        next_conn: AtomicU64::new(1),
    });
    let app = Router::new().route("/ws", get(ws_upgrade)).with_state(shared);
    let (shutdown, signal) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = signal.await;
            })
            .await
    });
    Ok(ServerHandle { addr, stop, worker, shutdown, server })
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, shared))
}

async fn connection(socket: WebSocket, shared: Arc<Shared>) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<ServerMessage>();
    let session_id = shared.session_id.clone();
    let writer = tokio::spawn(async move {
        let mut seq = 0u64;
        while let Some(message) = rx.recv().await {
            seq += 1;
            let env = ServerEnvelope { protocol_version: PROTOCOL_VERSION, session_id: session_id.clone(), seq, message };
            let text = serde_json::to_string(&env).expect("server messages serialise");
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    if shared.connected.swap(true, Ordering::SeqCst) {
        let _ = tx.send(ServerMessage::Error {
            code: ErrorCode::Busy,
            message: "an operator is already connected".into(),
            in_reply_to: None,
        });
        drop(tx);
        let _ = writer.await;
        return;
    }
    let conn = shared.next_conn.fetch_add(1, Ordering::SeqCst);
    let _ = shared.inbound.send(LoopEvent::Connect { conn, tx: tx.clone() });
    let mut validator = InboundValidator::new(shared.session_id.clone());
    while let Some(Ok(frame)) = stream.next().await {
        match frame {
            Message::Text(text) => match validator.check(&text) {
                Ok(env) => {
                    let _ = shared.inbound.send(LoopEvent::Message { env, tx: tx.clone() });
                }
                Err(v) => {
                    let _ = tx.send(v.into_message());
                }
            },
            Message::Binary(_) => {
                let _ = tx.send(ServerMessage::Error {
                    code: ErrorCode::Malformed,
                    message: "binary frames are not accepted".into(),
                    in_reply_to: None,
                });
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    let _ = shared.inbound.send(LoopEvent::Disconnect { conn });
    shared.connected.store(false, Ordering::SeqCst);
    drop(tx);
    let _ = writer.await;
}

struct Outputs {
    journal: Option<BufWriter<File>>,
    events: Option<BufWriter<File>>,
    events_written: usize,
}

impl Outputs {
    fn open(config: &GatewayConfig) -> anyhow::Result<Outputs> {
        let open = |p: &Option<PathBuf>| -> anyhow::Result<Option<BufWriter<File>>> {
            p.as_ref()
                .map(|p| File::create(p).map(BufWriter::new).with_context(|| format!("create {}", p.display())))
                .transpose()
        };
        Ok(Outputs { journal: open(&config.record)?, events: open(&config.events)?, events_written: 0 })
    }

    fn journal(&mut self, line: &JournalLine) -> anyhow::Result<()> {
        if let Some(w) = &mut self.journal {
            line.write_to(w)?;
        }
        Ok(())
    }

    fn flush(&mut self, session: &Session) -> anyhow::Result<()> {
        if let Some(w) = &mut self.events {
            for e in &session.log.events[self.events_written..] {
                serde_json::to_writer(&mut *w, e)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        self.events_written = session.log.events.len();
        if let Some(w) = &mut self.journal {
            w.flush()?;
        }
        Ok(())
    }
}

fn snapshot(driver: &Driver) -> ServerMessage {
    ServerMessage::StateSnapshot { step: driver.step_index(), snapshot: Box::new(driver.session.snapshot()) }
}

/// Single writer of the session. Client messages are applied between steps
/// in arrival order and journaled with the step index.
fn run_loop(
    mut driver: Driver,
    mut rx: mpsc::UnboundedReceiver<LoopEvent>,
    stop: &AtomicBool,
    config: &GatewayConfig,
) -> anyhow::Result<Session> {
    let mut out = Outputs::open(config)?;
    let mut client: Option<(u64, mpsc::UnboundedSender<ServerMessage>)> = None;
    let period = (config.pace > 0.0).then(|| Duration::from_secs_f64(driver.dt() / config.pace));
    let mut next = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        let step = driver.step_index();
        let mut changed = false;
        while let Ok(event) = rx.try_recv() {
            match event {
                LoopEvent::Connect { conn, tx } => {
                    let _ = tx.send(snapshot(&driver));
                    client = Some((conn, tx));
                }
                LoopEvent::Disconnect { conn } => {
                    if client.as_ref().is_some_and(|(c, _)| *c == conn) {
                        client = None;
                        let line = JournalLine::Disconnect { step, disconnect: true };
                        out.journal(&line)?;
                        if let Some(input) = line_input(&line) {
                            let _ = driver.apply(&input);
                        }
                    }
                }
                LoopEvent::Message { env, tx } => {
                    let line = JournalLine::Message { step, message: env };
                    out.journal(&line)?;
                    let JournalLine::Message { message: env, .. } = &line else { unreachable!() };
                    match &env.message {
                        ClientMessage::RequestSnapshot => {
                            let _ = tx.send(snapshot(&driver));
                        }
                        ClientMessage::RequestView => {
                            let frame = Box::new(render_view(&driver.session));
                            let _ = tx.send(ServerMessage::ViewFrame { step, frame });
                        }
                        _ => {
                            let Some(input) = line_input(&line) else { continue };
                            let is_action = matches!(input, DriverInput::Action { .. });
                            if let Err(e) = driver.apply(&input) {
                                let _ = tx.send(ServerMessage::Error {
                                    code: ErrorCode::Rejected,
                                    message: e.to_string(),
                                    in_reply_to: Some(env.seq),
                                });
                            }
                            changed |= is_action;
                        }
                    }
                }
            }
        }
        let before = driver.phase();
        let result = driver.step();
        out.flush(&driver.session)?;
        result?;
        if let Some((_, tx)) = &client {
            let executing = driver.phase() == Phase::Executing;
            if changed || driver.phase() != before || (executing && driver.step_index().is_multiple_of(config.snapshot_every)) {
                let _ = tx.send(snapshot(&driver));
            }
        }
        if let Some(period) = period {
            next += period;
            let now = Instant::now();
            if next > now {
                std::thread::sleep(next - now);
            } else {
                next = now;
            }
        }
    }
    out.journal(&JournalLine::End { step: driver.step_index(), end: true })?;
    out.flush(&driver.session)?;
    Ok(driver.into_session())
}
