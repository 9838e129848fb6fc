use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

use privatexr::server::{router, AppState};
use privatexr_core::data::{normalize, synth_generate, SynthConfig};
use privatexr_core::nn::{ModelSpec, TrainedModel};
use privatexr_core::serving::single_model_bundle;

fn state(fps: f64) -> Arc<AppState> {
    let ds = normalize(&synth_generate(&SynthConfig { dim: 8, users: 3, ..SynthConfig::default() }).unwrap()).unwrap();
    let model = TrainedModel::initialize(ModelSpec::mlp(8, 4, vec![6]), 2).unwrap();
    let bundle = single_model_bundle(model, ds.feature_names().to_vec(), ds.class_names().to_vec(), vec![0, 3]).unwrap();
    AppState::new(bundle, ds, fps, 0).unwrap()
}

async fn spawn(fps: f64) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state(fps))).await.unwrap() });
    format!("{addr}")
}

#[tokio::test]
async fn health_and_info() {
    let addr = spawn(10.0).await;
    let h: Value = reqwest::get(format!("http://{addr}/health")).await.unwrap().json().await.unwrap();
    assert_eq!(h, json!({"status": "ok"}));
    let info: Value = reqwest::get(format!("http://{addr}/model/info")).await.unwrap().json().await.unwrap();
    assert_eq!(info["class_names"], json!(["none", "low", "medium", "high"]));
    assert_eq!(info["feature_names"].as_array().unwrap().len(), 8);
    let eps: Vec<f64> = info["levels"].as_array().unwrap().iter().map(|l| l["epsilon"].as_f64().unwrap()).collect();
    assert_eq!(eps, [5.0, 3.0, 1.0]);
    assert_eq!(info["levels"][2]["selected_features"], json!([0, 3]));
}

#[tokio::test]
async fn predict_endpoint() {
    let addr = spawn(10.0).await;
    let client = reqwest::Client::new();
    let url = format!("http://{addr}/predict");
    let post = |body: Value| client.post(&url).json(&body).send();

    let r = post(json!({"features": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], "mode": "off"})).await.unwrap();
    assert_eq!(r.status(), 200);
    let a: Value = r.json().await.unwrap();
    assert_eq!(a["epsilon"], Value::Null);
    let proba: f64 = a["proba"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((proba - 1.0).abs() < 1e-9);
    assert!(a["latency_ms"].as_f64().unwrap() >= 0.0);

    // concurrent identical "off" requests agree
    let body = json!({"features": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], "mode": "off"});
    let replies = futures_util::future::join_all((0..8).map(|_| post(body.clone()))).await;
    for r in replies {
        let v: Value = r.unwrap().json().await.unwrap();
        assert_eq!(v["proba"], a["proba"]);
    }

    let r = post(json!({"features": vec![0.0; 8], "mode": "high"})).await.unwrap();
    let v: Value = r.json().await.unwrap();
    assert_eq!(v["epsilon"], 1.0);

    let r = post(json!({"features": vec![0.0; 8], "mode": "extreme"})).await.unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().await.unwrap()["field"], "mode");
    let r = post(json!({"features": vec![0.0; 3]})).await.unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().await.unwrap()["field"], "features");
    let r = post(json!({"feature": vec![0.0; 8]})).await.unwrap();
    assert_eq!(r.json::<Value>().await.unwrap()["field"], "features");
    let r = client.post(&url).body("{oops").header("content-type", "application/json").send().await.unwrap();
    assert_eq!(r.status(), 400);
}

async fn next_json<S>(ws: &mut S) -> Value
where
    S: StreamExt<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap().unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

#[tokio::test]
async fn stream_acks_before_switching() {
    let addr = spawn(50.0).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/stream")).await.unwrap();
    let first = next_json(&mut ws).await;
    assert_eq!(first["type"], "prediction");
    assert_eq!(first["mode"], "off");
    assert_eq!(first["epsilon"], Value::Null);

    for (mode, eps) in [("high", json!(1.0)), ("low", json!(5.0)), ("off", Value::Null)] {
        ws.send(Message::Text(json!({"type": "set_mode", "mode": mode}).to_string().into())).await.unwrap();
        // predictions already in flight keep the old mode until the ack arrives
        let mut msg = next_json(&mut ws).await;
        while msg["type"] == "prediction" {
            assert_ne!(msg["mode"], mode);
            msg = next_json(&mut ws).await;
        }
        assert_eq!(msg, json!({"type": "mode_ack", "mode": mode}));
        let p = next_json(&mut ws).await;
        assert_eq!(p["type"], "prediction");
        assert_eq!(p["mode"], mode);
        assert_eq!(p["epsilon"], eps);
    }

    ws.send(Message::Text(json!({"type": "set_mode", "mode": "max"}).to_string().into())).await.unwrap();
    let mut msg = next_json(&mut ws).await;
    while msg["type"] == "prediction" {
        msg = next_json(&mut ws).await;
    }
    assert_eq!(msg["type"], "error");
}

#[tokio::test]
async fn stream_replays_in_order() {
    let addr = spawn(100.0).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/stream")).await.unwrap();
    let mut last = None;
    for _ in 0..5 {
        let p = next_json(&mut ws).await;
        let t = p["t"].as_u64().unwrap();
        if let Some(prev) = last {
            assert_eq!(t, prev + 1);
        }
        last = Some(t);
        assert!(["none", "low", "medium", "high"].contains(&p["label"].as_str().unwrap()));
    }
}
