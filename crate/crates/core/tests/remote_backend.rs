//! Remote backend against an in-process HTTP server.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use edabench_core::backends::{
    comprehend, validate_click, BackendError, BackendId, Dispatcher, RemoteBackend, RemoteConfig, RetryPolicy, Role,
    YesNoSignal,
};
use image::RgbImage;
use serde_json::{json, Value};

#[derive(Clone)]
struct Mock {
    hits: Arc<AtomicUsize>,
    /// Status codes for the first requests; afterwards 200.
    script: Arc<Vec<u16>>,
    last_body: Arc<Mutex<Option<Value>>>,
    last_auth: Arc<Mutex<Option<String>>>,
}

async fn handler(State(m): State<Mock>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let n = m.hits.fetch_add(1, Ordering::SeqCst);
    *m.last_auth.lock().unwrap() = headers
        .get("authorization")
        .map(|v| v.to_str().unwrap().to_string());
    *m.last_body.lock().unwrap() = Some(body);
    let status = m.script.get(n).copied().unwrap_or(200);
    let reply = json!({
        "choices": [{
            "message": {"role": "assistant", "content": "Yes"},
            "logprobs": {"content": [{
                "token": "Yes", "logprob": -0.1,
                "top_logprobs": [{"token": "Yes", "logprob": -0.1}, {"token": "No", "logprob": -2.4}]
            }]}
        }]
    });
    (StatusCode::from_u16(status).unwrap(), Json(reply))
}

async fn serve(script: Vec<u16>) -> (String, Mock) {
    let mock = Mock {
        hits: Arc::new(AtomicUsize::new(0)),
        script: Arc::new(script),
        last_body: Arc::new(Mutex::new(None)),
        last_auth: Arc::new(Mutex::new(None)),
    };
    let app = Router::new().route("/v1/chat/completions", post(handler)).with_state(mock.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1/chat/completions"), mock)
}

fn backend(endpoint: String) -> RemoteBackend {
    let id = BackendId::new("qwen", [Role::Comprehend, Role::Validate], None).unwrap();
    RemoteBackend::new(
        id,
        RemoteConfig {
            endpoint,
            model: "qwen2.5-vl-72b".into(),
            token: Some("secret".into()),
            timeout: Duration::from_secs(5),
        },
    )
    .unwrap()
}

fn dispatcher(max_attempts: u32) -> Dispatcher {
    Dispatcher::new(RetryPolicy {
        max_attempts,
        base_backoff: Duration::from_millis(20),
        backoff_factor: 2.0,
        per_backend_rate: None,
        max_in_flight: 4,
    })
}

fn image() -> Arc<RgbImage> {
    Arc::new(RgbImage::from_pixel(8, 6, image::Rgb([200, 10, 10])))
}

#[tokio::test]
async fn recovers_after_two_rate_limits() {
    let (url, mock) = serve(vec![429, 429]).await;
    let b = backend(url);
    let start = std::time::Instant::now();
    let ans = comprehend(&dispatcher(5), &b, "s/Large/comprehend", "Add a port", image())
        .await
        .unwrap();
    assert_eq!(ans, "Yes");
    assert_eq!(mock.hits.load(Ordering::SeqCst), 3);
    // 20 ms + 40 ms of backoff.
    assert!(start.elapsed() >= Duration::from_millis(60));
}

#[tokio::test]
async fn gives_up_after_max_attempts() {
    let (url, mock) = serve(vec![500; 10]).await;
    let b = backend(url);
    let err = comprehend(&dispatcher(5), &b, "k", "q", image()).await.unwrap_err();
    assert!(matches!(err, BackendError::BackendUnavailable { attempts: 5, .. }), "{err}");
    assert_eq!(mock.hits.load(Ordering::SeqCst), 5);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let (url, mock) = serve(vec![400]).await;
    let b = backend(url);
    let err = comprehend(&dispatcher(5), &b, "k", "q", image()).await.unwrap_err();
    assert!(matches!(err, BackendError::BackendUnavailable { attempts: 1, .. }));
    assert_eq!(mock.hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn validator_request_shape_and_logit_readout() {
    let (url, mock) = serve(vec![]).await;
    let b = backend(url);
    let sig = validate_click(&dispatcher(1), &b, "k", "Add a port", image()).await.unwrap();
    assert_eq!(sig, YesNoSignal::Logits { yes: -0.1, no: -2.4 });

    assert_eq!(mock.last_auth.lock().unwrap().as_deref(), Some("Bearer secret"));
    let body = mock.last_body.lock().unwrap().clone().unwrap();
    assert_eq!(body["model"], "qwen2.5-vl-72b");
    assert_eq!(body["logprobs"], true);
    assert_eq!(body["temperature"], 0.0);
    let content = body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(content[0]["type"], "text");
    assert!(content[0]["text"].as_str().unwrap().contains("Add a port"));
    let url = content[1]["image_url"]["url"].as_str().unwrap();
    assert!(url.starts_with("data:image/png;base64,"));
}

#[tokio::test]
async fn unreachable_endpoint_is_unavailable() {
    let b = backend("http://127.0.0.1:9/none".into());
    let err = comprehend(&dispatcher(2), &b, "k", "q", image()).await.unwrap_err();
    assert!(matches!(err, BackendError::BackendUnavailable { attempts: 2, .. }));
}
