//! HTTP side of the cockpit: `/ws` for the live session, everything else
//! served from the asset directory.

use std::future::Future;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::watch;

use crate::protocol::{
    decode, encode, Control, Message, Phase, ProtocolError, SessionStatus, TelemetryFrame,
};
use crate::session::{Session, SessionConfig, SessionError};

/// Page served at `/` when no asset directory is configured.
pub const FALLBACK_INDEX: &str = include_str!("index.html");

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Directory holding the built cockpit UI.
    pub assets: Option<PathBuf>,
    pub session: SessionConfig,
}

pub fn router(cfg: ServerConfig) -> Router {
    let cfg = Arc::new(cfg);
    Router::new()
        .route("/ws", get(ws_upgrade))
        .fallback(static_asset)
        .with_state(cfg)
}

/// Serve until `shutdown` resolves.
pub async fn serve<F>(listener: TcpListener, cfg: ServerConfig, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(cfg))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(cfg): State<Arc<ServerConfig>>) -> Response {
    ws.on_upgrade(move |socket| run_connection(socket, cfg.session))
}

fn idle_status() -> Control {
    Control::Status(SessionStatus {
        phase: Phase::Idle,
        scenario: None,
        accepted_inputs: 0,
        stale_inputs: 0,
        malformed_inputs: 0,
    })
}

fn error(message: impl ToString, available: Vec<String>) -> Message {
    Message::Control(Control::Error {
        message: message.to_string(),
        available,
    })
}

/// One browser connection; it may run at most one session at a time.
struct Connection {
    cfg: SessionConfig,
    session: Option<Session>,
    telemetry: Option<watch::Receiver<Option<TelemetryFrame>>>,
    fence_sent: bool,
    last_phase: Phase,
}

impl Connection {
    fn status(&self) -> Message {
        Message::Control(
            self.session
                .as_ref()
                .map_or_else(idle_status, |s| Control::Status(s.status())),
        )
    }

    /// React to one text frame; returns replies for the client.
    fn handle_text(&mut self, text: &str) -> Vec<Message> {
        let message = match decode(text) {
            Ok(m) => m,
            Err(e) => {
                if let Some(s) = &self.session {
                    s.count_malformed();
                }
                return vec![error(e, Vec::new())];
            }
        };
        match message {
            Message::Input(msg) => match &self.session {
                // Stale inputs are expected under reordering and only counted.
                Some(s) => match s.handle_input(msg) {
                    Err(crate::session::InputRejection::Malformed(e)) => vec![error(e, Vec::new())],
                    _ => Vec::new(),
                },
                None => vec![error(SessionError::NoSession, Vec::new())],
            },
            Message::Control(Control::Start { scenario }) => {
                if self.session.is_some() {
                    return vec![error(SessionError::AlreadyActive, Vec::new())];
                }
                match Session::start(&scenario, self.cfg) {
                    Ok(s) => {
                        self.telemetry = Some(s.subscribe());
                        self.fence_sent = false;
                        self.last_phase = s.phase();
                        self.session = Some(s);
                        vec![self.status()]
                    }
                    Err(e) => vec![error(&e, e.available().to_vec())],
                }
            }
            Message::Control(Control::Launch) => match &self.session {
                Some(s) => match s.launch() {
                    Ok(()) => Vec::new(),
                    Err(e) => vec![error(e, Vec::new())],
                },
                None => vec![error(SessionError::NoSession, Vec::new())],
            },
            Message::Control(Control::Stop) => {
                if let Some(s) = self.session.take() {
                    s.stop();
                }
                self.telemetry = None;
                self.last_phase = Phase::Idle;
                vec![self.status()]
            }
            Message::Control(Control::Status(_) | Control::Error { .. })
            | Message::Telemetry(_) => {
                vec![error(
                    ProtocolError::Malformed("only the server sends this message type".into()),
                    Vec::new(),
                )]
            }
        }
    }

    /// Turn the newest frame into outgoing messages.
    fn handle_frame(&mut self, frame: Option<TelemetryFrame>) -> Vec<Message> {
        let Some(mut frame) = frame else {
            return Vec::new();
        };
        if !self.fence_sent {
            frame.geofence = self.session.as_ref().map(Session::fence);
            self.fence_sent = true;
        }
        let phase = frame.phase;
        let mut out = vec![Message::Telemetry(frame)];
        if phase != self.last_phase {
            self.last_phase = phase;
            out.push(self.status());
        }
        out
    }
}

async fn next_frame(
    rx: &mut Option<watch::Receiver<Option<TelemetryFrame>>>,
) -> Option<Option<TelemetryFrame>> {
    match rx {
        Some(r) => match r.changed().await {
            Ok(()) => Some(r.borrow_and_update().clone()),
            Err(_) => None,
        },
        None => std::future::pending().await,
    }
}

async fn run_connection(mut socket: WebSocket, cfg: SessionConfig) {
    let mut conn = Connection {
        cfg,
        session: None,
        telemetry: None,
        fence_sent: false,
        last_phase: Phase::Idle,
    };
    loop {
        let replies = tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(WsMessage::Text(text))) => conn.handle_text(text.as_str()),
                Some(Ok(WsMessage::Binary(_))) => conn.handle_text("\u{0}"),
                Some(Ok(_)) => Vec::new(),
                Some(Err(_)) | None => break,
            },
            frame = next_frame(&mut conn.telemetry) => match frame {
                Some(f) => conn.handle_frame(f),
                // Loop ended (violation or tick limit); keep the socket open.
                None => {
                    conn.telemetry = None;
                    Vec::new()
                }
            },
        };
        for m in replies {
            if socket
                .send(WsMessage::Text(encode(&m).into()))
                .await
                .is_err()
            {
                return;
            }
        }
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "wasm" => "application/wasm",
        "woff2" => "font/woff2",
        _ => "application/octet-stream",
    }
}

/// Map a request path onto a file below `root`, refusing anything that
/// could climb out of it.
pub fn resolve_asset(root: &Path, request: &str) -> Option<PathBuf> {
    let rel = request.trim_start_matches('/');
    let rel = if rel.is_empty() || rel.ends_with('/') {
        format!("{rel}index.html")
    } else {
        rel.to_string()
    };
    let mut out = root.to_path_buf();
    for c in Path::new(&rel).components() {
        match c {
            Component::Normal(part) => out.push(part),
            _ => return None,
        }
    }
    Some(out)
}

async fn static_asset(State(cfg): State<Arc<ServerConfig>>, uri: Uri) -> Response {
    let path = uri.path();
    let Some(root) = &cfg.assets else {
        return if path == "/" || path == "/index.html" {
            (
                [(header::CONTENT_TYPE, "text/html; charset=utf-8")],
                FALLBACK_INDEX,
            )
                .into_response()
        } else {
            StatusCode::NOT_FOUND.into_response()
        };
    };
    let Some(file) = resolve_asset(root, path) else {
        return StatusCode::BAD_REQUEST.into_response();
    };
    match tokio::fs::read(&file).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&file))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}
