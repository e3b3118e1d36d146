//! HTTP front end of the review service.
//!
//! Errors are returned as `{code, message, violations?}` with 400, 404, 409
//! or 422 for client mistakes and 500 otherwise.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use videor4_core::qc::{
    Decision, ExportManifest, ItemView, Page, QcError, QcService, ReviewItem, ReviewStatus,
    DEFAULT_PAGE_SIZE,
};
use videor4_core::trajectory::{Trajectory, Violation};

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violations: Option<Vec<Violation>>,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                code: "bad_request",
                message: message.into(),
                violations: None,
            },
        }
    }
}

impl From<QcError> for ApiError {
    fn from(e: QcError) -> Self {
        let message = e.to_string();
        let (status, code, violations) = match e {
            QcError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found", None),
            QcError::Conflict { .. } => (StatusCode::CONFLICT, "conflict", None),
            QcError::Validation { violations, .. } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                "validation",
                Some(violations),
            ),
            QcError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request", None),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None),
        };
        Self {
            status,
            body: ErrorBody {
                code,
                message,
                violations,
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
pub struct ListQuery {
    pub status: Option<String>,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct DecisionRequest {
    pub action: Decision,
    pub reviewer: String,
    pub expected_version: u64,
}

#[derive(Debug, Deserialize)]
pub struct EditRequest {
    pub trajectory: Trajectory,
    pub reviewer: String,
    pub expected_version: u64,
}

#[derive(Debug, Deserialize)]
pub struct ExportRequest {
    pub path: PathBuf,
}

type Svc = Arc<QcService>;

/// Runs a blocking service call off the async workers; writes fsync the log.
async fn blocking<T, F>(svc: &Svc, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&QcService) -> Result<T, QcError> + Send + 'static,
{
    let svc = svc.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError::from(QcError::BadRequest(format!("worker failed: {e}"))))?
        .map_err(ApiError::from)
}

async fn list_items(
    State(svc): State<Svc>,
    query: Result<Query<ListQuery>, QueryRejection>,
) -> ApiResult<Json<Page>> {
    let Query(q) = query?;
    let status = match q.status.as_deref() {
        None | Some("") => None,
        Some(s) => Some(s.parse::<ReviewStatus>()?),
    };
    let page = svc.list_items(
        status,
        q.page.unwrap_or(1),
        q.page_size.unwrap_or(DEFAULT_PAGE_SIZE),
    )?;
    Ok(Json(page))
}

async fn get_item(State(svc): State<Svc>, Path(id): Path<String>) -> ApiResult<Json<ItemView>> {
    Ok(Json(svc.get_item(&id)?))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn frame(
    State(svc): State<Svc>,
    Path((id, index)): Path<(String, usize)>,
) -> ApiResult<Response> {
    Ok(png(blocking(&svc, move |s| s.frame_png(&id, index)).await?))
}

async fn crop(
    State(svc): State<Svc>,
    Path((id, call)): Path<(String, usize)>,
) -> ApiResult<Response> {
    Ok(png(blocking(&svc, move |s| s.crop_png(&id, call)).await?))
}

async fn decision(
    State(svc): State<Svc>,
    Path(id): Path<String>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<Json<ReviewItem>> {
    let Json(req) = body?;
    let item = blocking(&svc, move |s| {
        s.record_decision(&id, req.action, &req.reviewer, req.expected_version)
    })
    .await?;
    Ok(Json(item))
}

async fn edit(
    State(svc): State<Svc>,
    Path(id): Path<String>,
    body: Result<Json<EditRequest>, JsonRejection>,
) -> ApiResult<Json<ReviewItem>> {
    let Json(req) = body?;
    let item = blocking(&svc, move |s| {
        s.save_edit(&id, req.trajectory, &req.reviewer, req.expected_version)
    })
    .await?;
    Ok(Json(item))
}

async fn export(
    State(svc): State<Svc>,
    body: Result<Json<ExportRequest>, JsonRejection>,
) -> ApiResult<Json<ExportManifest>> {
    let Json(req) = body?;
    let manifest = blocking(&svc, move |s| s.export_to(&req.path)).await?;
    Ok(Json(manifest))
}

pub fn router(svc: Svc) -> Router {
    Router::new()
        .route("/items", get(list_items))
        .route("/items/{id}", get(get_item))
        .route("/items/{id}/frames/{index}", get(frame))
        .route("/items/{id}/crops/{call_index}", get(crop))
        .route("/items/{id}/decision", post(decision))
        .route("/items/{id}/body", put(edit))
        .route("/export", post(export))
        .with_state(svc)
}

/// Serves until interrupted.
pub async fn serve(svc: Svc, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    eprintln!("qc service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
