use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dco_core::directive_store::DirectiveError;
use dco_core::orchestrator::{Orchestrator, PurgeScope};
use dco_core::sandbox::HostState;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;
use tracing::{info, warn};

/// Slack on top of a directive's own timeout before an invoke request is
/// answered with 504.
const DEADLINE_SLACK_MS: u64 = 5000;

#[derive(Clone)]
pub struct AppState {
    pub orchestrator: Arc<Orchestrator>,
    pub directives_path: PathBuf,
}

struct ApiError(StatusCode, Value);

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self(status, json!({ "error": message.into() }))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<DirectiveError> for ApiError {
    fn from(e: DirectiveError) -> Self {
        let status = match e {
            DirectiveError::UnknownDirective(_) => StatusCode::NOT_FOUND,
            DirectiveError::EmptyText | DirectiveError::Invalid { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

fn to_json(v: impl serde::Serialize) -> ApiResult {
    serde_json::to_value(v).map(Json).map_err(ApiError::internal)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/directives", get(list_directives))
        .route("/api/directives/{id}", get(get_directive).put(put_directive))
        .route("/api/directives/{id}/invoke", post(invoke))
        .route("/api/directives/{id}/regenerate", post(regenerate))
        .route("/api/blocks", get(list_blocks))
        .route("/api/purge", post(purge))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_directives(State(s): State<AppState>) -> ApiResult {
    let list: Vec<_> = s.orchestrator.directives().list();
    to_json(list.iter().map(|d| d.as_ref()).collect::<Vec<_>>())
}

async fn get_directive(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let d = s.orchestrator.directives().get(&id)?;
    to_json(d.as_ref())
}

#[derive(Deserialize)]
struct TextBody {
    text: String,
}

async fn put_directive(State(s): State<AppState>, Path(id): Path<String>, Json(body): Json<TextBody>) -> ApiResult {
    blocking(move || {
        let store = s.orchestrator.directives();
        let updated = store.update_text(&id, &body.text)?;
        store.save(&s.directives_path)?;
        info!(%id, version = updated.version, "directive updated");
        to_json(updated.as_ref())
    })
    .await
}

#[derive(Deserialize, Default)]
struct InvokeBody {
    #[serde(default)]
    args: Vec<Value>,
    #[serde(default)]
    host: Option<HostState>,
}

async fn invoke(State(s): State<AppState>, Path(id): Path<String>, body: Option<Json<InvokeBody>>) -> Response {
    let InvokeBody { args, host } = body.map(|Json(b)| b).unwrap_or_default();
    let timeout_ms = match s.orchestrator.directives().get(&id) {
        Ok(d) => d.policy.timeout_ms,
        Err(e) => return ApiError::from(e).into_response(),
    };
    let deadline = Duration::from_millis(timeout_ms + DEADLINE_SLACK_MS);
    let orch = s.orchestrator.clone();
    let call_id = id.clone();
    let work = tokio::task::spawn_blocking(move || orch.invoke_action_with_host(&call_id, &args, host));
    match tokio::time::timeout(deadline, work).await {
        Ok(Ok(Ok(result))) => match serde_json::to_value(&result) {
            Ok(v) => Json(v).into_response(),
            Err(e) => ApiError::internal(e).into_response(),
        },
        Ok(Ok(Err(e))) => ApiError::from(e).into_response(),
        Ok(Err(join)) => ApiError::internal(join).into_response(),
        Err(_) => {
            warn!(%id, "invoke deadline exceeded");
            let block = s.orchestrator.blocks().list(Some(&id)).pop();
            let body = json!({ "error": "deadline exceeded", "block": block });
            (StatusCode::GATEWAY_TIMEOUT, Json(body)).into_response()
        }
    }
}

async fn regenerate(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    blocking(move || {
        let block = s.orchestrator.regenerate(&id)?;
        to_json(block)
    })
    .await
}

#[derive(Deserialize)]
struct BlocksQuery {
    directive: Option<String>,
}

async fn list_blocks(State(s): State<AppState>, Query(q): Query<BlocksQuery>) -> ApiResult {
    to_json(s.orchestrator.blocks().list(q.directive.as_deref()))
}

#[derive(Deserialize)]
struct PurgeBody {
    scope: PurgeScope,
}

async fn purge(State(s): State<AppState>, Json(body): Json<PurgeBody>) -> ApiResult {
    blocking(move || {
        let purged = s.orchestrator.purge_blocks(body.scope).map_err(ApiError::internal)?;
        Ok(Json(json!({ "purged": purged })))
    })
    .await
}

pub fn serve(state: AppState, bind: &str, port: u16) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((bind, port))
            .await
            .with_context(|| format!("binding {bind}:{port}"))?;
        let addr = listener.local_addr()?;
        info!(%addr, "serving");
        println!("listening on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("server error")
    })
}
