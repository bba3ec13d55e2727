use std::path::Path;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use sandbot::commands::load_scenario;
use sandbot::gateway::{serve, GatewayConfig};
use sandbot::journal::{replay, Journal};
use sandbot::protocol::{ClientEnvelope, ClientMessage, ErrorCode, ServerEnvelope, ServerMessage, PROTOCOL_VERSION};
use sandbot_core::autonomy::CorrectionInput;
use sandbot_core::exec::Parallelism;
use sandbot_core::session::{OperatorAction, Phase, Session};
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

fn fixture() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/plate.json"))
}

struct Client {
    ws: Ws,
    seq: u64,
    last_server_seq: u64,
}

impl Client {
    async fn connect(addr: std::net::SocketAddr) -> Client {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
        Client { ws, seq: 0, last_server_seq: 0 }
    }

    async fn send(&mut self, message: ClientMessage) -> u64 {
        self.seq += 1;
        let env = ClientEnvelope { protocol_version: PROTOCOL_VERSION, session_id: "test".into(), seq: self.seq, message };
        self.ws.send(Message::text(serde_json::to_string(&env).unwrap())).await.unwrap();
        self.seq
    }

    async fn recv(&mut self) -> ServerMessage {
        loop {
            let frame = tokio::time::timeout(Duration::from_secs(20), self.ws.next()).await.unwrap().unwrap().unwrap();
            if let Message::Text(t) = frame {
                let env: ServerEnvelope = serde_json::from_str(&t).unwrap();
                assert!(env.seq > self.last_server_seq, "server seq must increase");
                self.last_server_seq = env.seq;
                return env.message;
            }
        }
    }

    /// Next snapshot satisfying `pred`, skipping everything else.
    async fn wait_for(&mut self, pred: impl Fn(&sandbot_core::session::SessionSnapshot) -> bool) {
        loop {
            if let ServerMessage::StateSnapshot { snapshot, .. } = self.recv().await {
                if pred(&snapshot) {
                    return;
                }
            }
        }
    }

    async fn action(&mut self, action: OperatorAction) {
        self.send(ClientMessage::PhaseAction { action }).await;
    }
}

async fn start(dir: &Path, pace: f64) -> (sandbot::gateway::ServerHandle, sandbot_core::scenario::Scenario) {
    let (sc, robot) = load_scenario(fixture()).unwrap();
    let session = Session::new(sc.clone(), robot, 11).unwrap();
    let config = GatewayConfig {
        session_id: "test".into(),
        record: Some(dir.join("journal.jsonl")),
        events: Some(dir.join("events.jsonl")),
        snapshot_every: 2,
        pace,
    };
    (serve(session, "127.0.0.1:0".parse().unwrap(), config).await.unwrap(), sc)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn first_snapshot_is_positioning_and_bad_frames_are_harmless() {
    let dir = tempfile::tempdir().unwrap();
    let (handle, _) = start(dir.path(), 1.0).await;
    let mut c = Client::connect(handle.addr).await;
    match c.recv().await {
        ServerMessage::StateSnapshot { snapshot, .. } => assert_eq!(snapshot.phase, Phase::Positioning),
        other => panic!("{other:?}"),
    }
    c.ws.send(Message::text("{not json")).await.unwrap();
    assert!(matches!(c.recv().await, ServerMessage::Error { code: ErrorCode::Malformed, .. }));
    let seq = c.send(ClientMessage::PhaseAction { action: OperatorAction::Start }).await;
    loop {
        match c.recv().await {
            ServerMessage::Error { code, in_reply_to, .. } => {
                assert_eq!((code, in_reply_to), (ErrorCode::Rejected, Some(seq)));
                break;
            }
            ServerMessage::StateSnapshot { .. } => continue,
            other => panic!("{other:?}"),
        }
    }
    c.send(ClientMessage::RequestSnapshot).await;
    c.wait_for(|s| s.phase == Phase::Positioning).await;

    let mut second = Client::connect(handle.addr).await;
    assert!(matches!(second.recv().await, ServerMessage::Error { code: ErrorCode::Busy, .. }));

    c.send(ClientMessage::RequestView).await;
    loop {
        if let ServerMessage::ViewFrame { frame, .. } = c.recv().await {
            assert_eq!((frame.width, frame.height), (150, 100));
            break;
        }
    }
    c.ws.close(None).await.unwrap();
    let session = handle.shutdown().await.unwrap();
    assert_eq!(session.phase, Phase::Positioning);
    assert_eq!(session.removal_steps, 0);
}

/// Live session with a 30 Hz correction stream, then the recorded journal
/// replayed headless.
#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn correction_stream_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (handle, sc) = start(dir.path(), 1.0).await;
    let mut c = Client::connect(handle.addr).await;
    c.recv().await;
    c.action(OperatorAction::Scan).await;
    c.action(OperatorAction::ScanComplete).await;
    c.wait_for(|s| s.phase == Phase::Registering && s.registration.is_some()).await;
    c.action(OperatorAction::ConfirmFit).await;
    c.wait_for(|s| s.phase == Phase::ReachabilityReview).await;
    c.action(OperatorAction::Start).await;
    c.wait_for(|s| s.phase == Phase::Executing).await;

    let mut sent = Vec::new();
    let mut tick = tokio::time::interval(Duration::from_millis(33));
    for i in 0..30 {
        tick.tick().await;
        let u = 0.5 * ((i as f64) * 0.3).sin();
        sent.push(c.send(ClientMessage::CorrectionStream { input: CorrectionInput::coupled(u) }).await);
    }
    tokio::time::sleep(Duration::from_millis(100)).await;
    c.action(OperatorAction::Pause).await;
    c.wait_for(|s| s.phase == Phase::Paused).await;
    c.ws.close(None).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    let live = handle.shutdown().await.unwrap();

    let consumed: Vec<_> = live.log.named("correction_consumed").collect();
    assert!(!consumed.is_empty());
    let seqs: Vec<u64> = consumed.iter().map(|e| e.payload["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(*seqs.last().unwrap(), *sent.last().unwrap());
    let superseded = consumed.last().unwrap().payload["superseded"].as_u64().unwrap();
    assert_eq!(consumed.len() as u64 + superseded, sent.len() as u64);

    let events = std::fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
    assert_eq!(events, live.log.to_jsonl());
    let journal = Journal::parse(&std::fs::read_to_string(dir.path().join("journal.jsonl")).unwrap()).unwrap();
    let robot = sc.load_robot(None).unwrap();
    let replayed = replay(&sc, robot, 11, &journal, Parallelism::Sequential).unwrap();
    assert_eq!(replayed.log.to_jsonl(), events);
    assert_eq!(replayed.grid, live.grid);
}
