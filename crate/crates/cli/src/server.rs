//! HTTP and WebSocket transport over [`Predictor`].

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use privatexr_core::data::Dataset;
use privatexr_core::serving::{ModelBundle, Predictor, PrivacyMode, ServerMessage, StreamSession};

pub struct AppState {
    predictor: Predictor,
    replay: Dataset,
    frame_interval: Duration,
}

impl AppState {
    /// Checks the bundle against itself and the replay data.
    pub fn new(bundle: ModelBundle, replay: Dataset, fps: f64, seed: u64) -> privatexr_core::Result<Arc<Self>> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(privatexr_core::Error::Config(format!("fps must be positive, got {fps}")));
        }
        let predictor = Predictor::new(bundle, seed)?;
        if replay.dim() != predictor.dim() {
            return Err(privatexr_core::Error::Config(format!(
                "replay data has {} features, the bundle expects {}",
                replay.dim(),
                predictor.dim()
            )));
        }
        if replay.is_empty() {
            return Err(privatexr_core::Error::Config("replay data is empty".into()));
        }
        Ok(Arc::new(Self {
            predictor,
            replay,
            frame_interval: Duration::from_secs_f64(1.0 / fps),
        }))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/model/info", get(info))
        .route("/predict", post(predict))
        .route("/stream", get(stream))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn info(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    Json(state.predictor.info())
}

fn bad_request(field: &str, message: impl Into<String>) -> Response {
    let body = json!({ "error": message.into(), "field": field });
    (StatusCode::BAD_REQUEST, Json(body)).into_response()
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return bad_request("body", format!("invalid JSON: {e}")),
    };
    let features: Vec<f64> = match value.get("features").and_then(Value::as_array) {
        Some(items) => match items.iter().map(Value::as_f64).collect::<Option<Vec<_>>>() {
            Some(f) => f,
            None => return bad_request("features", "features must be numbers"),
        },
        None => return bad_request("features", "missing features array"),
    };
    if features.len() != state.predictor.dim() {
        return bad_request(
            "features",
            format!("expected {} features, got {}", state.predictor.dim(), features.len()),
        );
    }
    let mode = match value.get("mode") {
        None => PrivacyMode::Off,
        Some(Value::String(s)) => match s.parse::<PrivacyMode>() {
            Ok(m) => m,
            Err(e) => return bad_request("mode", e.to_string()),
        },
        Some(_) => return bad_request("mode", "mode must be a string"),
    };
    match state.predictor.predict(&features, mode) {
        Ok(p) => Json(p).into_response(),
        Err(e) => bad_request("features", e.to_string()),
    }
}

async fn stream(State(state): State<Arc<AppState>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| replay(socket, state))
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    match serde_json::to_string(msg) {
        Ok(text) => socket.send(Message::Text(text.into())).await.is_ok(),
        Err(_) => false,
    }
}

/// One session: a replay cursor and mode owned by this connection. Replies to
/// client messages are sent from the same loop, so an ack always precedes the
/// first prediction under the new mode.
async fn replay(mut socket: WebSocket, state: Arc<AppState>) {
    let mut session = StreamSession::default();
    let mut ticker = tokio::time::interval(state.frame_interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let reply = session.handle(text.as_str());
                    if !send(&mut socket, &reply).await {
                        return;
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
            _ = ticker.tick() => {
                let msg = match session.next_prediction(&state.predictor, &state.replay) {
                    Ok(m) => m,
                    Err(e) => ServerMessage::Error { message: e.to_string() },
                };
                if !send(&mut socket, &msg).await {
                    return;
                }
            }
        }
    }
}
