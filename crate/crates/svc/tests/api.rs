use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use chrono::{DateTime, Utc};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use templeak_core::percept::{StubExtractor, StubSegmenter};
use templeak_core::pipeline::{import_corpus, run_analyze, run_detect, seal_run, AnalyzeOptions, DetectOptions, Perception};
use templeak_core::store::Store;
use templeak_core::synthcorpus::{plant_benchmark, BenchmarkParams};
use templeak_svc::{router, ServiceConfig};

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    run_id: String,
}

fn at() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2026-02-03T04:05:06Z").unwrap().with_timezone(&Utc)
}

async fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let mut p = BenchmarkParams::new(2, 3, 4, 1);
    p.width = 128;
    p.height = 128;
    let corpus = plant_benchmark(&p).unwrap();
    let run_id = import_corpus(&store, &corpus, "fixture", at()).unwrap();
    let seg = StubSegmenter::new(store.load_atlas().unwrap());
    let pc = Perception::new(&seg, &StubExtractor);
    run_detect(&store, &pc, &run_id, &DetectOptions::default()).await.unwrap();
    run_analyze(&store, &pc, &run_id, &AnalyzeOptions::default()).await.unwrap();
    Fixture {
        root: dir.path().to_path_buf(),
        _dir: dir,
        run_id,
    }
}

fn app(f: &Fixture, config: ServiceConfig) -> Router {
    router(Store::open(&f.root).unwrap(), config)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, "GET", uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = call(app, "POST", uri, Some(body)).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn groups_match_report_and_findings_keep_file_order() {
    let f = fixture().await;
    let app = app(&f, ServiceConfig::default());

    let (s, runs) = get_json(&app, "/api/runs").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(runs[0]["run_id"], f.run_id.as_str());

    let (s, groups) = get_json(&app, &format!("/api/runs/{}/groups", f.run_id)).await;
    assert_eq!(s, StatusCode::OK);
    let report: Value = serde_json::from_slice(&std::fs::read(f.root.join("runs").join(&f.run_id).join("report.json")).unwrap()).unwrap();
    let stripped: Vec<Value> = groups
        .as_array()
        .unwrap()
        .iter()
        .map(|g| {
            assert_eq!(g["status"], "suspected");
            let mut g = g.clone();
            g.as_object_mut().unwrap().remove("status");
            g
        })
        .collect();
    assert_eq!(Value::Array(stripped), report["groups"]);

    let (s, findings) = get_json(&app, &format!("/api/runs/{}/findings", f.run_id)).await;
    assert_eq!(s, StatusCode::OK);
    let file = std::fs::read_to_string(f.root.join("runs").join(&f.run_id).join("findings.jsonl")).unwrap();
    let from_file: Vec<Value> = file.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!from_file.is_empty());
    assert_eq!(findings, Value::Array(from_file));

    let (s, run) = get_json(&app, &format!("/api/runs/{}", f.run_id)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(run["summary"]["groups"], 2);
}

#[tokio::test]
async fn group_detail_images_and_unknown_ids() {
    let f = fixture().await;
    let app = app(&f, ServiceConfig::default());
    let (_, groups) = get_json(&app, &format!("/api/runs/{}/groups", f.run_id)).await;
    let gid = groups[0]["group_id"].as_str().unwrap();

    let (s, g) = get_json(&app, &format!("/api/groups/{gid}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(g["members"], groups[0]["members"]);
    assert_eq!(g["run_id"], f.run_id.as_str());
    let masks = g["masks"].as_array().unwrap();
    assert_eq!(masks.len(), g["members"].as_array().unwrap().len());
    assert!(masks.iter().all(|m| m["mask"]["counts"].is_array()));
    assert!(g["findings"]
        .as_array()
        .unwrap()
        .iter()
        .any(|f| f["subject"] == gid || f["evidence"]["group_id"] == gid));

    let digest = g["members"][0].as_str().unwrap();
    let (s, png) = call(&app, "GET", &format!("/api/images/{digest}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[..4], b"\x89PNG");
    let on_disk = Store::open(&f.root).unwrap().get_image(digest).unwrap();
    assert_eq!(png, on_disk);

    assert_eq!(get_json(&app, &format!("/api/images/{}", "0".repeat(64))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(get_json(&app, "/api/images/not-a-digest").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get_json(&app, "/api/groups/nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get_json(&app, "/api/runs/nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get_json(&app, "/api/runs/nope/findings").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn verdicts_append_and_surface_latest_per_analyst() {
    let f = fixture().await;
    let app = app(&f, ServiceConfig::default());
    let (_, groups) = get_json(&app, &format!("/api/runs/{}/groups", f.run_id)).await;
    let gid = groups[0]["group_id"].as_str().unwrap().to_string();

    let (s, _) = post_json(&app, "/api/verdicts", json!({"group_id": gid, "decision": "maybe", "analyst": "ann"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post_json(&app, "/api/verdicts", json!({"group_id": "ghost", "decision": "confirmed", "analyst": "ann"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, body) = post_json(&app, "/api/verdicts", json!({"group_id": gid, "decision": "confirmed", "analyst": "ann", "note": "same bg"})).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(body["status"], "confirmed");
    let (_, groups) = get_json(&app, &format!("/api/runs/{}/groups", f.run_id)).await;
    assert_eq!(groups[0]["status"], "confirmed");

    // conflicting second analyst: both kept, status back to suspected
    let (s, body) = post_json(&app, "/api/verdicts", json!({"group_id": gid, "decision": "rejected", "analyst": "bob"})).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(body["status"], "suspected");
    let (_, g) = get_json(&app, &format!("/api/groups/{gid}")).await;
    assert_eq!(g["verdicts"].as_array().unwrap().len(), 2);
    assert_eq!(g["history"].as_array().unwrap().len(), 2);

    // bob changes his mind; history grows, latest-per-analyst does not
    post_json(&app, "/api/verdicts", json!({"group_id": gid, "decision": "leakage_confirmed", "analyst": "bob"})).await;
    let (_, g) = get_json(&app, &format!("/api/groups/{gid}")).await;
    assert_eq!(g["status"], "confirmed");
    assert_eq!(g["verdicts"].as_array().unwrap().len(), 2);
    assert_eq!(g["history"].as_array().unwrap().len(), 3);

    // survives a restart: state comes from the manifest
    let fresh = self::app(&f, ServiceConfig::default());
    let (_, groups) = get_json(&fresh, &format!("/api/runs/{}/groups", f.run_id)).await;
    assert_eq!(groups[0]["status"], "confirmed");
    let manifest = std::fs::read_to_string(f.root.join("runs").join(&f.run_id).join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.matches("\"type\":\"verdict\"").count(), 3);
}

#[tokio::test]
async fn promote_builds_six_prompts_for_one_confirmed_group() {
    let f = fixture().await;
    let app = app(&f, ServiceConfig::default());
    let (_, groups) = get_json(&app, &format!("/api/runs/{}/groups", f.run_id)).await;
    let g0 = groups[0]["group_id"].as_str().unwrap().to_string();
    let g1 = groups[1]["group_id"].as_str().unwrap().to_string();

    let body = |ids: Vec<&str>| json!({"run_id": f.run_id, "group_ids": ids, "target_provider_id": "other-model"});
    let (s, _) = post_json(&app, "/api/sweeps/promote", body(vec![])).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, err) = post_json(&app, "/api/sweeps/promote", body(vec![&g0])).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(err["error"].as_str().unwrap().contains(&g0));

    post_json(&app, "/api/verdicts", json!({"group_id": g0, "decision": "confirmed", "analyst": "ann"})).await;
    let (s, err) = post_json(&app, "/api/sweeps/promote", body(vec![&g0, &g1])).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(err["error"].as_str().unwrap().contains(&g1));

    let (s, out) = post_json(&app, "/api/sweeps/promote", body(vec![&g0, &g0])).await;
    assert_eq!(s, StatusCode::CREATED);
    let prompts = out["config"]["prompts"].as_array().unwrap();
    assert_eq!(prompts.len(), 6);
    assert_eq!(out["config"]["provider_id"], "other-model");
    assert!(std::path::Path::new(out["path"].as_str().unwrap()).exists());
    let (_, run) = get_json(&app, &format!("/api/runs/{}", f.run_id)).await;
    assert_eq!(run["promotions"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn sealed_run_refuses_writes() {
    let f = fixture().await;
    seal_run(&Store::open(&f.root).unwrap(), &f.run_id).unwrap();
    let app = app(&f, ServiceConfig::default());
    let (_, groups) = get_json(&app, &format!("/api/runs/{}/groups", f.run_id)).await;
    let gid = groups[0]["group_id"].as_str().unwrap();
    let (s, _) = post_json(&app, "/api/verdicts", json!({"group_id": gid, "decision": "confirmed", "analyst": "ann"})).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn bearer_token_and_spec() {
    let f = fixture().await;
    let app = app(
        &f,
        ServiceConfig {
            token: Some("t0k".into()),
            ..ServiceConfig::default()
        },
    );
    assert_eq!(get_json(&app, "/api/runs").await.0, StatusCode::UNAUTHORIZED);
    let req = Request::get("/api/runs")
        .header(header::AUTHORIZATION, "Bearer t0k")
        .body(Body::empty())
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::OK);

    let (s, spec) = get_json(&app, "/api/spec").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(spec["openapi"], "3.0.3");
    for p in ["/api/runs", "/api/groups/{gid}", "/api/verdicts", "/api/sweeps/promote"] {
        assert!(spec["paths"].get(p).is_some(), "{p}");
    }
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let f = fixture().await;
    let app = app(
        &f,
        ServiceConfig {
            token: Some("t0k".into()),
            ui_origin: Some("http://localhost:5173".into()),
            ..ServiceConfig::default()
        },
    );
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/verdicts")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert_eq!(
        resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN],
        "http://localhost:5173"
    );
}
