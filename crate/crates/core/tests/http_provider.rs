//! HttpProvider and the batch runner against a fake generation endpoint.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chrono::Utc;
use serde_json::{json, Value};

use templeak_core::imaging::encode_png;
use templeak_core::prompt_forge::{expand_grid, seed_schedule, Collocation, Descriptor, SweepConfig, DEFAULT_TEMPLATE};
use templeak_core::providers::{generate_batch, stub_image, GenerationRequest, WireRequest, HttpProvider, Provider, ProviderError};
use templeak_core::store::{RunKind, Store};
use templeak_core::transport::{HttpEndpoint, RetryPolicy, TransportError};

#[derive(Default)]
struct Fake {
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicUsize,
    // seeds that get one 429 before succeeding
    throttled: Mutex<HashSet<u64>>,
    auth: Mutex<Vec<Option<String>>>,
}

async fn generate(State(f): State<Arc<Fake>>, headers: HeaderMap, Json(r): Json<WireRequest>) -> (StatusCode, Json<Value>) {
    f.calls.fetch_add(1, Ordering::SeqCst);
    f.auth
        .lock()
        .unwrap()
        .push(headers.get("authorization").map(|v| v.to_str().unwrap().to_string()));
    if r.prompt.contains("forbidden") {
        return (
            StatusCode::BAD_REQUEST,
            Json(json!({"error": {"type": "content_policy", "message": "nope"}})),
        );
    }
    if r.seed % 3 == 0 && f.throttled.lock().unwrap().insert(r.seed) {
        return (StatusCode::TOO_MANY_REQUESTS, Json(json!({})));
    }
    let now = f.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    f.peak.fetch_max(now, Ordering::SeqCst);
    tokio::time::sleep(Duration::from_millis(20)).await;
    f.in_flight.fetch_sub(1, Ordering::SeqCst);
    let png = encode_png(&stub_image(&r.prompt, r.seed, r.width, r.height)).unwrap();
    (
        StatusCode::OK,
        Json(json!({"image_b64": STANDARD.encode(png), "meta": {"model": "fake", "n": 1}})),
    )
}

async fn serve(fake: Arc<Fake>) -> String {
    let app = Router::new().route("/v1/generate", post(generate)).with_state(fake);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base_delay: Duration::from_millis(5),
        jitter: 0.0,
    }
}

fn config(descriptors: &[&str], seeds: u32) -> SweepConfig {
    let colls = vec![Collocation::new("Area Rug", "home").unwrap().with_class("rug")];
    let descs: Vec<Descriptor> = descriptors.iter().map(|d| Descriptor::new(d).unwrap()).collect();
    SweepConfig {
        run_label: "http".into(),
        provider_id: "fake".into(),
        steps: 4,
        width: 32,
        height: 32,
        guidance: 7.5,
        seeds: seed_schedule(0, seeds).unwrap(),
        prompts: expand_grid(&descs, &colls, DEFAULT_TEMPLATE).unwrap(),
    }
}

#[tokio::test]
async fn batch_respects_concurrency_and_retries_429() {
    let fake = Arc::new(Fake::default());
    let url = serve(fake.clone()).await;
    let ep = HttpEndpoint::new(&url, Duration::from_secs(10))
        .unwrap()
        .with_retry(fast_retry())
        .with_token(Some("s3cret".into()));
    let provider = HttpProvider::new("fake", ep);
    let cfg = config(&["Floral", "Galaxy"], 6);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let run = store.create_run(&cfg, RunKind::Sweep, Utc::now()).unwrap();

    let out = generate_batch(&store, &run, &cfg, &provider, 3).await.unwrap();
    assert_eq!(out.records.len(), 12);
    assert!(out.failures.is_empty());
    assert_eq!(out.new_calls, 12);
    assert!(fake.peak.load(Ordering::SeqCst) <= 3, "peak {}", fake.peak.load(Ordering::SeqCst));
    // seeds 0 and 3 were each throttled once
    assert_eq!(fake.calls.load(Ordering::SeqCst), 12 + 2);
    assert!(fake.auth.lock().unwrap().iter().all(|a| a.as_deref() == Some("Bearer s3cret")));
    assert_eq!(out.records[0].provider_meta["model"], "fake");
    assert!(out.records[0].provider_meta.contains_key("latency_ms"));

    // a second pass is served entirely from the manifest
    let again = generate_batch(&store, &run, &cfg, &provider, 3).await.unwrap();
    assert_eq!(again.new_calls, 0);
    assert_eq!(fake.calls.load(Ordering::SeqCst), 14);
}

#[tokio::test]
async fn refusal_is_terminal_and_not_retried() {
    let fake = Arc::new(Fake::default());
    let url = serve(fake.clone()).await;
    let ep = HttpEndpoint::new(&url, Duration::from_secs(10)).unwrap().with_retry(fast_retry());
    let provider = HttpProvider::new("fake", ep);
    let req = GenerationRequest {
        prompt: "a forbidden thing".into(),
        seed: 1,
        steps: 4,
        width: 32,
        height: 32,
        guidance: 7.5,
        provider_id: "fake".into(),
    };
    let err = provider.generate(&req).await.unwrap_err();
    assert!(matches!(err, ProviderError::Transport(TransportError::Refused { .. })), "{err}");
    assert!(!err.is_retryable());
    assert_eq!(fake.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn failed_pairs_are_skipped_below_half() {
    let fake = Arc::new(Fake::default());
    let url = serve(fake.clone()).await;
    let ep = HttpEndpoint::new(&url, Duration::from_secs(10)).unwrap().with_retry(fast_retry());
    let provider = HttpProvider::new("fake", ep);
    // one refused prompt of three
    let cfg = config(&["Floral", "forbidden", "Galaxy"], 2);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let run = store.create_run(&cfg, RunKind::Sweep, Utc::now()).unwrap();
    let out = generate_batch(&store, &run, &cfg, &provider, 2).await.unwrap();
    assert_eq!(out.records.len(), 4);
    assert_eq!(out.failures.len(), 2);
    assert!(out.failures.iter().all(|f| f.prompt_index == 1));
    let state = store.replay(&run).unwrap();
    assert_eq!(state.records.len(), 4);
}

#[tokio::test]
async fn unreachable_endpoint_is_reported() {
    // bind then drop to get a port nobody listens on
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let ep = HttpEndpoint::new(&format!("http://127.0.0.1:{port}"), Duration::from_secs(2))
        .unwrap()
        .with_retry(fast_retry());
    let provider = HttpProvider::new("fake", ep);
    let cfg = config(&["Floral"], 1);
    let req = GenerationRequest {
        prompt: cfg.prompts[0].rendered.clone(),
        seed: 0,
        steps: 4,
        width: 32,
        height: 32,
        guidance: 7.5,
        provider_id: "fake".into(),
    };
    match provider.generate(&req).await {
        Err(ProviderError::Transport(e)) => assert!(e.is_unreachable(), "{e}"),
        other => panic!("expected unreachable, got {other:?}"),
    }
}
