use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use geoshield_cockpit::protocol::{decode, encode, Control, Message, Phase, PilotInputMsg};
use geoshield_cockpit::server::{serve, ServerConfig};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message as WsMessage;

type Client = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

async fn start_server(cfg: ServerConfig) -> (SocketAddr, tokio::sync::oneshot::Sender<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    tokio::spawn(serve(listener, cfg, async {
        let _ = rx.await;
    }));
    (addr, tx)
}

async fn send(ws: &mut Client, m: &Message) {
    ws.send(WsMessage::text(encode(m))).await.unwrap();
}

async fn send_raw(ws: &mut Client, text: &str) {
    ws.send(WsMessage::text(text.to_string())).await.unwrap();
}

/// Next message that is not telemetry.
async fn next_control(ws: &mut Client) -> Control {
    loop {
        let m = next(ws).await;
        if let Message::Control(c) = m {
            return c;
        }
    }
}

async fn next(ws: &mut Client) -> Message {
    let raw = tokio::time::timeout(Duration::from_secs(5), ws.next())
        .await
        .expect("server went quiet")
        .expect("socket closed")
        .unwrap();
    decode(raw.to_text().unwrap()).unwrap()
}

fn start(scenario: &str) -> Message {
    Message::Control(Control::Start {
        scenario: scenario.into(),
    })
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_session_lifecycle() {
    let (addr, _shutdown) = start_server(ServerConfig::default()).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws"))
        .await
        .unwrap();

    send_raw(
        &mut ws,
        r#"{"type":"control","payload":{"command":"stop"}}"#,
    )
    .await;
    match next_control(&mut ws).await {
        Control::Error { message, .. } => assert!(message.contains("version"), "{message}"),
        other => panic!("{other:?}"),
    }

    send(&mut ws, &start("atlantis")).await;
    match next_control(&mut ws).await {
        Control::Error { available, .. } => {
            assert!(available.contains(&"cockpit_arena".to_string()))
        }
        other => panic!("{other:?}"),
    }

    send(&mut ws, &start("cockpit_arena")).await;
    match next_control(&mut ws).await {
        Control::Status(s) => {
            assert_eq!(s.phase, Phase::Armed);
            assert_eq!(s.scenario.as_deref(), Some("cockpit_arena"));
        }
        other => panic!("{other:?}"),
    }
    let Message::Telemetry(first) = next(&mut ws).await else {
        panic!("expected telemetry");
    };
    let fence = first.geofence.expect("first frame carries the geofence");
    assert_eq!(fence.half_extents, [25.0, 25.0, 15.0]);
    assert_eq!(first.phase, Phase::Armed);

    send(&mut ws, &start("cockpit_arena")).await;
    match next_control(&mut ws).await {
        Control::Error { message, .. } => assert!(message.contains("already active"), "{message}"),
        other => panic!("{other:?}"),
    }

    send(&mut ws, &Message::Control(Control::Launch)).await;
    match next_control(&mut ws).await {
        Control::Status(s) => assert_eq!(s.phase, Phase::Flying),
        other => panic!("{other:?}"),
    }

    for seq in 1..=20 {
        let msg = PilotInputMsg {
            seq,
            timestamp_ms: seq * 10,
            throttle: 0.55,
            roll_rate: 0.0,
            pitch_rate: 0.0,
            yaw_rate: 0.0,
        };
        send(&mut ws, &Message::Input(msg)).await;
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let mut climbing = None;
    for _ in 0..30 {
        if let Message::Telemetry(f) = next(&mut ws).await {
            assert!(f.geofence.is_none());
            if f.u_des.throttle == 0.55 {
                climbing = Some(f);
                break;
            }
        }
    }
    let f = climbing.expect("stick input reached the loop");
    assert!(f.input_age_ms.is_some());

    send(&mut ws, &Message::Control(Control::Stop)).await;
    match next_control(&mut ws).await {
        Control::Status(s) => {
            assert_eq!(s.phase, Phase::Idle);
            assert_eq!(s.scenario, None);
        }
        other => panic!("{other:?}"),
    }
    // A stopped connection can start again.
    send(&mut ws, &start("cockpit_arena")).await;
    match next_control(&mut ws).await {
        Control::Status(s) => assert_eq!(s.phase, Phase::Armed),
        other => panic!("{other:?}"),
    }
}

async fn http_get(addr: SocketAddr, path: &str) -> (u16, String, String) {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let req = format!("GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n");
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut buf = Vec::new();
    stream.read_to_end(&mut buf).await.unwrap();
    let text = String::from_utf8_lossy(&buf).into_owned();
    let (head, body) = text.split_once("\r\n\r\n").unwrap();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, head.to_ascii_lowercase(), body.to_string())
}

fn asset_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("geoshield-assets-{}", std::process::id()));
    std::fs::create_dir_all(dir.join("js")).unwrap();
    std::fs::write(dir.join("index.html"), "<h1>cockpit</h1>").unwrap();
    std::fs::write(dir.join("js/app.js"), "console.log(1);").unwrap();
    dir
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn static_assets_are_served_from_the_directory() {
    let dir = asset_dir();
    let (addr, _shutdown) = start_server(ServerConfig {
        assets: Some(dir.clone()),
        ..ServerConfig::default()
    })
    .await;

    let (status, head, body) = http_get(addr, "/").await;
    assert_eq!(status, 200);
    assert!(head.contains("content-type: text/html"));
    assert_eq!(body, "<h1>cockpit</h1>");

    let (status, head, body) = http_get(addr, "/js/app.js").await;
    assert_eq!(status, 200);
    assert!(head.contains("content-type: text/javascript"));
    assert_eq!(body, "console.log(1);");

    assert_eq!(http_get(addr, "/missing.css").await.0, 404);
    let (status, _, _) = http_get(addr, "/js/../../etc/passwd").await;
    assert!(
        status == 400 || status == 404,
        "traversal answered {status}"
    );

    std::fs::remove_dir_all(dir).unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fallback_page_without_an_asset_directory() {
    let (addr, _shutdown) = start_server(ServerConfig::default()).await;
    let (status, head, body) = http_get(addr, "/").await;
    assert_eq!(status, 200);
    assert!(head.contains("content-type: text/html"));
    assert!(body.contains("/ws"));
    assert_eq!(http_get(addr, "/app.js").await.0, 404);
}
