//! Triage service: read-only JSON views over a store, plus the two write
//! paths analysts use (verdicts and promotion). Every write is a manifest
//! append, so restarting the service loses nothing.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use templeak_core::analyze::Finding;
use templeak_core::detect::{GroupStatus, ReportGroup, TemplateGroup};
use templeak_core::percept::RleMask;
use templeak_core::store::{group_index, Event, RunState, RunStatus, RunSummary, Store, StoreError};
use templeak_core::triage::{derive_status, latest_per_analyst, promote, Decision, PromoteError, Verdict};

mod openapi;

/// Environment variable holding the shared bearer token. Unset or empty
/// disables auth.
pub const TOKEN_ENV: &str = "TEMPLEAK_SVC_TOKEN";

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub token: Option<String>,
    /// Origin allowed by CORS; `None` allows any.
    pub ui_origin: Option<String>,
    /// Fixed timestamp for verdicts, for reproducible runs.
    pub clock: Option<DateTime<Utc>>,
}

struct AppState {
    store: Store,
    config: ServiceConfig,
    // verdict and promote do read-check-append; serialize them
    write_lock: tokio::sync::Mutex<()>,
}

type Shared = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownRun(_) | StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::RunComplete(_) | StoreError::Corrupt { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(store: Store, config: ServiceConfig) -> Router {
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]);
    let cors = match config.ui_origin.as_deref().and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(origin) => cors.allow_origin(AllowOrigin::exact(origin)),
        None => cors.allow_origin(Any),
    };
    let state = Arc::new(AppState {
        store,
        config,
        write_lock: tokio::sync::Mutex::new(()),
    });
    let api = Router::new()
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/groups", get(run_groups))
        .route("/api/runs/{id}/findings", get(run_findings))
        .route("/api/groups/{gid}", get(get_group))
        .route("/api/images/{digest}", get(get_image))
        .route("/api/verdicts", post(post_verdict))
        .route("/api/sweeps/promote", post(post_promote))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/api/spec", get(|| async { Json(openapi::document()) }))
        .merge(api)
        .layer(cors)
        .with_state(state)
}

pub async fn serve(store: Store, config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store, config)).await
}

async fn require_token(State(s): State<Shared>, req: Request, next: Next) -> Response {
    let Some(token) = s.config.token.as_deref().filter(|t| !t.is_empty()) else {
        return next.run(req).await;
    };
    if req.method() == Method::OPTIONS {
        return next.run(req).await;
    }
    let ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token);
    if ok {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response()
    }
}

#[derive(Serialize)]
struct GroupView {
    #[serde(flatten)]
    group: ReportGroup,
    status: GroupStatus,
}

impl From<&TemplateGroup> for GroupView {
    fn from(g: &TemplateGroup) -> Self {
        Self {
            group: ReportGroup::from(g),
            status: g.status,
        }
    }
}

async fn list_runs(State(s): State<Shared>) -> ApiResult<Json<Vec<RunSummary>>> {
    let mut out = Vec::new();
    for id in s.store.run_ids()? {
        match s.store.replay(&id) {
            Ok(state) => out.push(s.store.summarize(&state)),
            Err(e) => log::warn!("skipping run {id}: {e}"),
        }
    }
    Ok(Json(out))
}

async fn get_run(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let state = s.store.replay(&id)?;
    let detection = state.detection.as_ref().map(|d| {
        json!({ "threshold": d.threshold, "mode": d.mode, "report_digest": d.report_digest })
    });
    Ok(Json(json!({
        "summary": s.store.summarize(&state),
        "config": state.config,
        "detection": detection,
        "warnings": state.warnings,
        "promotions": state.promotions.iter().map(|(g, p, d)| {
            json!({ "group_ids": g, "target_provider_id": p, "config_digest": d })
        }).collect::<Vec<_>>(),
    })))
}

async fn run_groups(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Vec<GroupView>>> {
    let state = s.store.replay(&id)?;
    Ok(Json(state.groups().iter().map(GroupView::from).collect()))
}

/// Findings in findings.jsonl order.
async fn run_findings(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Vec<Finding>>> {
    if !s.store.run_exists(&id) {
        return Err(ApiError::not_found(format!("unknown run {id}")));
    }
    let path = s.store.findings_path(&id)?;
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    };
    let findings = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<Vec<Finding>, _>>()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(findings))
}

fn find_group(store: &Store, gid: &str) -> ApiResult<(RunState, TemplateGroup)> {
    let run_id = group_index(store)?
        .remove(gid)
        .ok_or_else(|| ApiError::not_found(format!("unknown group {gid}")))?;
    let state = store.replay(&run_id)?;
    let group = state
        .groups()
        .into_iter()
        .find(|g| g.group_id == gid)
        .ok_or_else(|| ApiError::not_found(format!("unknown group {gid}")))?;
    Ok((state, group))
}

fn linked(f: &Finding, g: &TemplateGroup) -> bool {
    f.subject == g.group_id
        || f.evidence.get("group_id").and_then(Value::as_str) == Some(g.group_id.as_str())
        || g.members.contains(&f.subject)
}

#[derive(Serialize)]
struct MemberMask<'a> {
    image_digest: &'a str,
    mask: Option<&'a RleMask>,
}

async fn get_group(State(s): State<Shared>, Path(gid): Path<String>) -> ApiResult<Json<Value>> {
    let (state, group) = find_group(&s.store, &gid)?;
    let class = group.collocation.segmentation_class.clone().unwrap_or_default();
    let masks: Vec<MemberMask> = group
        .members
        .iter()
        .map(|m| MemberMask {
            image_digest: m,
            mask: state.masks.get(&(m.clone(), class.clone())),
        })
        .collect();
    let findings: Vec<&Finding> = state.findings.iter().filter(|f| linked(f, &group)).collect();
    let latest: Vec<&Verdict> = latest_per_analyst(&state.verdicts, &gid).into_values().collect();
    let history: Vec<&Verdict> = state.verdicts.iter().filter(|v| v.group_id == gid).collect();
    Ok(Json(json!({
        "group_id": group.group_id,
        "run_id": state.run_id,
        "status": group.status,
        "collocation": group.collocation,
        "members": group.members,
        "min_pairwise": group.min_pairwise,
        "masks": masks,
        "findings": findings,
        "verdicts": latest,
        "history": history,
    })))
}

async fn get_image(State(s): State<Shared>, Path(digest): Path<String>) -> ApiResult<Response> {
    let bytes = s
        .store
        .get_image(&digest)
        .map_err(|_| ApiError::not_found(format!("unknown image {digest}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response())
}

#[derive(Deserialize)]
struct VerdictBody {
    group_id: String,
    decision: String,
    analyst: String,
    #[serde(default)]
    note: String,
}

fn writable(state: &RunState) -> ApiResult<()> {
    if state.status == RunStatus::Complete {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("run {} is sealed", state.run_id),
        ));
    }
    Ok(())
}

async fn post_verdict(State(s): State<Shared>, Json(body): Json<VerdictBody>) -> ApiResult<(StatusCode, Json<Value>)> {
    let decision = Decision::parse(&body.decision)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid decision {:?}", body.decision)))?;
    if body.analyst.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "analyst must not be empty"));
    }
    let _guard = s.write_lock.lock().await;
    let (state, _) = find_group(&s.store, &body.group_id)?;
    writable(&state)?;
    let verdict = Verdict {
        group_id: body.group_id.clone(),
        decision,
        analyst: body.analyst.trim().to_string(),
        note: body.note,
        created_at: s.config.clock.unwrap_or_else(Utc::now),
    };
    s.store.append_event(&state.run_id, Event::Verdict { verdict: verdict.clone() })?;
    let after = s.store.replay(&state.run_id)?;
    let status = derive_status(&after.verdicts, &body.group_id);
    Ok((StatusCode::CREATED, Json(json!({ "verdict": verdict, "status": status }))))
}

#[derive(Deserialize)]
struct PromoteBody {
    run_id: String,
    group_ids: Vec<String>,
    target_provider_id: String,
}

async fn post_promote(State(s): State<Shared>, Json(body): Json<PromoteBody>) -> ApiResult<(StatusCode, Json<Value>)> {
    if body.group_ids.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "group_ids must not be empty"));
    }
    if body.target_provider_id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "target_provider_id must not be empty"));
    }
    let _guard = s.write_lock.lock().await;
    let state = s.store.replay(&body.run_id)?;
    let config = promote(&state.config, &state.groups(), &body.group_ids, &body.target_provider_id).map_err(|e| {
        let status = match e {
            PromoteError::Empty | PromoteError::Invalid(_) => StatusCode::BAD_REQUEST,
            PromoteError::Unconfirmed(_) | PromoteError::UnknownGroup(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.to_string())
    })?;
    writable(&state)?;
    s.store.append_event(
        &state.run_id,
        Event::Promotion {
            group_ids: body.group_ids.clone(),
            target_provider_id: body.target_provider_id.clone(),
            config_digest: config.digest(),
        },
    )?;
    let path = s.store.save_sweep(&config)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "config": config,
            "config_digest": config.digest(),
            "path": path,
        })),
    ))
}
