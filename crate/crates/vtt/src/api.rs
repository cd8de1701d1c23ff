use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::VttError;
use crate::session::Truth;
use crate::store::VttStore;

impl IntoResponse for VttError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            log::error!("{self}");
        }
        let body = serde_json::json!({ "error": self.code(), "message": self.to_string() });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, VttError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| VttError::Malformed(format!("invalid request body: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    rater_id: String,
    n_per_class: usize,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct CreateResponse {
    session_id: String,
    total: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RatingRequest {
    item_id: String,
    judgment: Truth,
    elapsed_ms: u64,
}

async fn create(State(store): State<Arc<VttStore>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateRequest = parse(&body)?;
    if req.rater_id.trim().is_empty() {
        return Err(VttError::InvalidRequest("rater_id must not be empty".into()));
    }
    let s = store.create(&req.rater_id, req.n_per_class, req.seed)?;
    let body = CreateResponse {
        session_id: s.session_id,
        total: s.items.len(),
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn next(State(store): State<Arc<VttStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(store.next_item(&id)?).into_response())
}

async fn rate(State(store): State<Arc<VttStore>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: RatingRequest = parse(&body)?;
    Ok(Json(store.submit(&id, &req.item_id, req.judgment, req.elapsed_ms)?).into_response())
}

async fn report(State(store): State<Arc<VttStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(store.report(&id)?).into_response())
}

async fn image(State(store): State<Arc<VttStore>>, Path(item_id): Path<String>) -> ApiResult<Response> {
    let path = store.image_path(&item_id)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| VttError::io(path.display().to_string(), e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn not_found(uri: axum::http::Uri) -> VttError {
    VttError::NoRoute(uri.path().to_string())
}

pub fn router(store: Arc<VttStore>) -> Router {
    Router::new()
        .route("/api/sessions", post(create))
        .route("/api/sessions/{id}/next", get(next))
        .route("/api/sessions/{id}/ratings", post(rate))
        .route("/api/sessions/{id}/report", get(report))
        .route("/api/images/{item_id}", get(image))
        .fallback(not_found)
        .with_state(store)
}

/// Serve the API on `addr` until the process ends.
pub async fn serve(store: Arc<VttStore>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}
