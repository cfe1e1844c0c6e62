//! Front-ends feeding the coordinator queue: WebSocket JSON, a serial
//! byte stream carrying binary frames, and single-key stdin commands.

use std::path::PathBuf;

use abb_core::protocol::{parse_control, ControlMessage, StreamDecoder};
use abb_core::{Command, Event};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncReadExt, BufReader};
use tokio::sync::{broadcast, mpsc, watch};

use crate::coordinator::{encode_png, Input, Outbound, Snapshots};

#[derive(Clone)]
pub struct AppState {
    pub inputs: mpsc::Sender<Input>,
    pub outbound: broadcast::Sender<Outbound>,
    pub snapshots: Snapshots,
    pub shutdown: watch::Receiver<bool>,
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/control", get(control))
        .route("/frame.png", get(frame_png))
        .route("/camera.png", get(camera_png))
        .with_state(app)
}

async fn control(ws: WebSocketUpgrade, State(app): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| client(socket, app))
}

async fn png_response(frame: Option<std::sync::Arc<abb_core::Raster>>) -> Response {
    let Some(frame) = frame else {
        return (StatusCode::NOT_FOUND, "no frame yet").into_response();
    };
    match tokio::task::spawn_blocking(move || encode_png(&frame)).await {
        Ok(Ok(png)) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "encoding failed").into_response(),
    }
}

async fn frame_png(State(app): State<AppState>) -> Response {
    let frame = app.snapshots.frame.borrow().clone();
    png_response(frame).await
}

async fn camera_png(State(app): State<AppState>) -> Response {
    let frame = app.snapshots.camera.borrow().clone();
    png_response(frame).await
}

fn error_json(kind: &str, message: String) -> String {
    Event::Error {
        kind: kind.into(),
        message,
    }
    .to_json()
}

async fn client(socket: WebSocket, app: AppState) {
    let (mut tx, mut rx) = socket.split();
    let mut events = app.outbound.subscribe();
    let mut shutdown = app.shutdown.clone();
    let (reply_tx, mut replies) = mpsc::channel::<String>(16);

    let hello = app.snapshots.state.borrow().to_string();
    if tx.send(Message::Text(hello.into())).await.is_err() {
        return;
    }

    let writer = async move {
        loop {
            let msg = tokio::select! {
                ev = events.recv() => match ev {
                    Ok(Outbound::Event(text)) => Message::Text(text.to_string().into()),
                    Ok(Outbound::Frame(png)) => Message::Binary(png),
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        tracing::debug!(skipped = n, "slow client");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                Some(text) = replies.recv() => Message::Text(text.into()),
                _ = shutdown.changed() => {
                    let _ = tx.send(Message::Close(None)).await;
                    break;
                }
            };
            if tx.send(msg).await.is_err() {
                break;
            }
        }
    };

    let inputs = app.inputs.clone();
    let reader = async move {
        while let Some(Ok(msg)) = rx.next().await {
            let input = match msg {
                Message::Text(text) => match parse_control(text.as_str()) {
                    Ok(ControlMessage::Command(cmd)) => Input::Command(cmd),
                    Ok(ControlMessage::CalibPoints(p)) => Input::CalibPoints(p),
                    Err(e) => {
                        let _ = reply_tx.send(error_json("bad_message", e.to_string())).await;
                        continue;
                    }
                },
                Message::Binary(_) => {
                    let msg = "binary messages are not accepted on /control".to_string();
                    let _ = reply_tx.send(error_json("bad_message", msg)).await;
                    continue;
                }
                Message::Close(_) => break,
                _ => continue,
            };
            if inputs.send(input).await.is_err() {
                break;
            }
        }
    };

    tokio::select! {
        _ = writer => {}
        _ = reader => {}
    }
}

/// Decodes binary command frames from `input` until end of stream.
pub async fn serial_reader<R: AsyncRead + Unpin>(mut input: R, inputs: mpsc::Sender<Input>) -> std::io::Result<()> {
    let mut decoder = StreamDecoder::new();
    let mut buf = vec![0u8; 4096];
    loop {
        let n = input.read(&mut buf).await?;
        if n == 0 {
            if !decoder.pending().is_empty() {
                tracing::debug!(bytes = decoder.pending().len(), "serial stream ended mid-frame");
            }
            return Ok(());
        }
        let (commands, errors) = decoder.push(&buf[..n]);
        for cmd in commands {
            if inputs.send(Input::Command(cmd)).await.is_err() {
                return Ok(());
            }
        }
        for err in errors {
            tracing::debug!("serial: {err}");
            let input = Input::TransportError {
                kind: "frame".into(),
                message: err.to_string(),
            };
            if inputs.send(input).await.is_err() {
                return Ok(());
            }
        }
    }
}

/// Opens `path` (a tty, FIFO or plain file) and reads frames from it. The
/// port is dropped on error or end of stream; the service keeps running.
pub async fn serial_port(path: PathBuf, inputs: mpsc::Sender<Input>) {
    let file = match tokio::fs::File::open(&path).await {
        Ok(f) => f,
        Err(e) => {
            tracing::error!(path = %path.display(), "serial port unavailable: {e}");
            return;
        }
    };
    tracing::info!(path = %path.display(), "serial port open");
    match serial_reader(file, inputs).await {
        Ok(()) => tracing::info!(path = %path.display(), "serial stream ended"),
        Err(e) => tracing::warn!(path = %path.display(), "serial port dropped: {e}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyAction {
    Command(Command),
    Quit,
}

pub const BRIGHTNESS_STEP: i8 = 10;
pub const CONTRAST_STEP: i8 = 10;

/// Single-key bindings.
pub fn key_command(key: char) -> Option<KeyAction> {
    let cmd = match key {
        'n' | ' ' => Command::Next,
        'p' => Command::Prev,
        'c' => Command::Capture,
        'x' => Command::Delete,
        'g' => Command::ToggleGrid,
        's' => Command::ToggleSource,
        '+' => Command::Brightness(BRIGHTNESS_STEP),
        '-' => Command::Brightness(-BRIGHTNESS_STEP),
        ']' => Command::Contrast(CONTRAST_STEP),
        '[' => Command::Contrast(-CONTRAST_STEP),
        'r' => Command::RotateStep,
        'i' => Command::ZoomStep(1),
        'o' => Command::ZoomStep(-1),
        'k' => Command::StartCalibration,
        'b' => Command::Blank,
        'q' => return Some(KeyAction::Quit),
        _ => return None,
    };
    Some(KeyAction::Command(cmd))
}

/// One line of keyboard input: `#<n>` recalls library image `n`, anything
/// else is read key by key.
pub fn keyboard_line(line: &str) -> Result<Vec<KeyAction>, String> {
    let line = line.trim();
    if let Some(index) = line.strip_prefix('#') {
        let index: u16 = index
            .trim()
            .parse()
            .map_err(|_| format!("recall needs an index 0..=65535, got {index:?}"))?;
        return Ok(vec![KeyAction::Command(Command::Recall(index))]);
    }
    line.chars()
        .filter(|c| !c.is_whitespace() || *c == ' ')
        .map(|c| key_command(c).ok_or_else(|| format!("unbound key {c:?}")))
        .collect()
}

/// Reads keyboard lines until end of input or `q`.
pub async fn keyboard_reader<R: AsyncRead + Unpin>(input: R, inputs: mpsc::Sender<Input>) {
    let mut lines = BufReader::new(input).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        let actions = match keyboard_line(&line) {
            Ok(a) => a,
            Err(e) => {
                tracing::warn!("keyboard: {e}");
                continue;
            }
        };
        for action in actions {
            let input = match action {
                KeyAction::Command(cmd) => Input::Command(cmd),
                KeyAction::Quit => Input::Shutdown,
            };
            if inputs.send(input).await.is_err() {
                return;
            }
        }
    }
}
