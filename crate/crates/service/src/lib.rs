//! HTTP front end for annotation sessions.
//!
//! | route | |
//! |---|---|
//! | `POST /sessions` | create and pretrain a session (201) |
//! | `GET /sessions` | list sessions |
//! | `GET /sessions/{id}` | descriptor |
//! | `GET /sessions/{id}/batch` | next batch, idempotent per round |
//! | `POST /sessions/{id}/annotations` | partial or full answers |
//! | `GET /sessions/{id}/metrics` | round records |
//! | `GET /datasets` | registered dataset names |
//!
//! Errors are JSON `{"error": message, "code": kind}`.

mod error;
mod state;
pub mod wire;

use std::path::PathBuf;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use state::{AppState, DatasetEntry, Manifest};
pub use wire::*;

pub const DEFAULT_PORT: u16 = 8787;

fn parse<T: DeserializeOwned>(body: &[u8], status: fn(String) -> ApiError) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| status(format!("invalid body: {e}")))
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SessionDescriptor>), ApiError> {
    let spec: SessionSpec = parse(&body, ApiError::bad_request)?;
    Ok((StatusCode::CREATED, Json(app.create(spec).await?)))
}

async fn list_sessions(State(app): State<AppState>) -> Json<Vec<SessionDescriptor>> {
    Json(app.list().await)
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionDescriptor>, ApiError> {
    Ok(Json(app.describe(&id).await?))
}

async fn get_batch(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<BatchResponse>, ApiError> {
    Ok(Json(app.batch(&id).await?))
}

async fn post_annotations(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SubmissionResponse>, ApiError> {
    // unknown sessions are 404 even with a malformed body
    app.describe(&id).await?;
    let sub: AnnotationSubmission = parse(&body, ApiError::unprocessable)?;
    Ok(Json(app.annotate(&id, sub).await?))
}

async fn get_metrics(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<MetricsResponse>, ApiError> {
    Ok(Json(app.metrics(&id).await?))
}

async fn list_datasets(State(app): State<AppState>) -> Json<Vec<String>> {
    Json(app.dataset_names())
}

/// The API router, with permissive CORS. Static UI files are served under
/// `/ui` when a directory is given.
pub fn router(app: AppState, ui_dir: Option<PathBuf>) -> Router {
    let mut r = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/batch", get(get_batch))
        .route("/sessions/{id}/annotations", post(post_annotations))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .route("/datasets", get(list_datasets))
        .route("/health", get(|| async { "ok" }));
    if let Some(dir) = ui_dir {
        r = r.nest_service("/ui", ServeDir::new(dir));
    }
    r.layer(CorsLayer::permissive()).with_state(app)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, app: AppState, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    axum::serve(listener, router(app, ui_dir)).await
}
