//! HTTP+JSON binding of [`ClusterService`]. Translates requests and errors
//! only; every decision is made by the service.
//!
//! Tenants authenticate with `Authorization: Bearer <token>`, the
//! administrator with `X-Admin-Secret`. Errors are `{"code", "message"}`
//! bodies with the matching status.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::multipart::Multipart;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use super::service::{ClusterService, FanoutRequest, ReviewDecision};
use super::ApiError;
use crate::domain::{AppId, JobId, RegistrationForm};

pub const ADMIN_HEADER: &str = "x-admin-secret";

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status =
            StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorBody {
            code: &self.code,
            message: &self.message,
        };
        (status, Json(body)).into_response()
    }
}

type Svc = State<Arc<ClusterService>>;

fn bearer(headers: &HeaderMap) -> Option<String> {
    let v = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    v.strip_prefix("Bearer ").map(|t| t.trim().to_owned())
}

fn admin(headers: &HeaderMap) -> Option<String> {
    headers.get(ADMIN_HEADER)?.to_str().ok().map(str::to_owned)
}

/// Runs a blocking service call off the async executor.
async fn call<T, F>(svc: Arc<ClusterService>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&ClusterService) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn body<T>(json: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    json.map(|Json(v)| v)
        .map_err(|r| ApiError::bad_request(r.body_text()))
}

async fn submit(
    State(svc): Svc,
    form: Result<Json<RegistrationForm>, JsonRejection>,
) -> Result<Response, ApiError> {
    let form = body(form)?;
    let out = call(svc, move |s| s.submit_registration(&form)).await?;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn application(
    State(svc): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let token = bearer(&headers);
    let out = call(svc, move |s| {
        s.application_view(&AppId::from(id), token.as_deref())
    })
    .await?;
    Ok(Json(out).into_response())
}

async fn confirm(
    State(svc): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let token = bearer(&headers);
    let out = call(svc, move |s| s.confirm(&AppId::from(id), token.as_deref())).await?;
    Ok(Json(out).into_response())
}

async fn upload(
    State(svc): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
    mut form: Multipart,
) -> Result<Response, ApiError> {
    let token = bearer(&headers);
    let mut archive: Option<Bytes> = None;
    let mut environment: Option<String> = None;
    let too_large = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(413, "PayloadTooLarge", e.body_text())
        } else {
            ApiError::bad_request(e.body_text())
        }
    };
    while let Some(field) = form.next_field().await.map_err(too_large)? {
        match field.name() {
            Some("archive") => archive = Some(field.bytes().await.map_err(too_large)?),
            Some("environment") => environment = Some(field.text().await.map_err(too_large)?),
            _ => {}
        }
    }
    let environment =
        environment.ok_or_else(|| ApiError::bad_request("missing `environment` field"))?;
    let archive = archive.unwrap_or_default();
    let out = call(svc, move |s| {
        s.upload_job(
            &AppId::from(id),
            token.as_deref(),
            environment.trim(),
            &archive,
        )
    })
    .await?;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn usage(
    State(svc): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let (token, secret) = (bearer(&headers), admin(&headers));
    let out = call(svc, move |s| {
        s.usage_report(&AppId::from(id), token.as_deref(), secret.as_deref())
    })
    .await?;
    Ok(Json(out).into_response())
}

async fn execute(
    State(svc): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let token = bearer(&headers);
    let out = call(svc, move |s| {
        s.execute_job(&JobId::from(id), token.as_deref())
    })
    .await?;
    Ok(Json(out).into_response())
}

async fn job(
    State(svc): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let token = bearer(&headers);
    let out = call(svc, move |s| {
        s.job_status(&JobId::from(id), token.as_deref())
    })
    .await?;
    Ok(Json(out).into_response())
}

async fn result(
    State(svc): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let token = bearer(&headers);
    let disposition = format!("attachment; filename=\"{id}-result.tar\"");
    let bytes = call(svc, move |s| {
        s.download_results(&JobId::from(id), token.as_deref())
    })
    .await?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/x-tar".to_owned()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        bytes,
    )
        .into_response())
}

async fn cluster(State(svc): Svc, headers: HeaderMap) -> Result<Response, ApiError> {
    let secret = admin(&headers);
    let out = call(svc, move |s| s.cluster_snapshot(secret.as_deref())).await?;
    Ok(Json(out).into_response())
}

async fn admin_applications(State(svc): Svc, headers: HeaderMap) -> Result<Response, ApiError> {
    let secret = admin(&headers);
    let out = call(svc, move |s| s.admin_applications(secret.as_deref())).await?;
    Ok(Json(out).into_response())
}

async fn review(
    State(svc): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
    decision: Result<Json<ReviewDecision>, JsonRejection>,
) -> Result<Response, ApiError> {
    let secret = admin(&headers);
    let decision = body(decision)?;
    let out = call(svc, move |s| {
        s.admin_review(&AppId::from(id), &decision, secret.as_deref())
    })
    .await?;
    Ok(Json(out).into_response())
}

async fn close(
    State(svc): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let secret = admin(&headers);
    let state = call(svc, move |s| s.close(&AppId::from(id), secret.as_deref())).await?;
    Ok(Json(serde_json::json!({ "state": state })).into_response())
}

async fn audit(State(svc): Svc, headers: HeaderMap) -> Result<Response, ApiError> {
    let secret = admin(&headers);
    let out = call(svc, move |s| s.audit_log(secret.as_deref())).await?;
    Ok(Json(out).into_response())
}

async fn fanout(
    State(svc): Svc,
    headers: HeaderMap,
    req: Result<Json<FanoutRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let secret = admin(&headers);
    let req = body(req)?;
    let out = call(svc, move |s| s.admin_fanout(&req, secret.as_deref())).await?;
    Ok(Json(out).into_response())
}

async fn not_found() -> ApiError {
    ApiError::new(404, "NoRoute", "no such endpoint")
}

pub fn router(service: Arc<ClusterService>) -> Router {
    // Leave headroom for multipart framing so oversize archives reach the
    // service and get a proper error body.
    let upload_limit = service.max_upload_bytes().saturating_add(1 << 20);
    Router::new()
        .route("/applications", post(submit))
        .route("/applications/{id}", get(application))
        .route("/applications/{id}/confirm", post(confirm))
        .route(
            "/applications/{id}/jobs",
            post(upload).layer(DefaultBodyLimit::max(upload_limit)),
        )
        .route("/applications/{id}/usage", get(usage))
        .route("/jobs/{id}", get(job))
        .route("/jobs/{id}/execute", post(execute))
        .route("/jobs/{id}/result", get(result))
        .route("/cluster", get(cluster))
        .route("/admin/applications", get(admin_applications))
        .route("/admin/applications/{id}/review", post(review))
        .route("/admin/applications/{id}/close", post(close))
        .route("/admin/audit", get(audit))
        .route("/admin/fanout", post(fanout))
        .fallback(not_found)
        .with_state(service)
}

/// Serves until the listener fails or `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<ClusterService>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "gateway listening");
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}
