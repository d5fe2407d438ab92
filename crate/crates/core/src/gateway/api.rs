//! HTTP routes over a shared [`Gateway`].

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::service::{EscalationStatus, Gateway, GatewayError, SubmitRequest};
use crate::engine::EngineError;
use crate::error::ValidationError;
use crate::types::Label;

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Clone)]
pub struct AppState {
    pub gateway: Arc<Gateway>,
    pub token: Option<Arc<str>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<Vec<ValidationError>>,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
    retry_after: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                fields: None,
            },
            retry_after: None,
        }
    }

    fn validation(fields: Vec<ValidationError>) -> Self {
        let mut e = ApiError::new(
            StatusCode::BAD_REQUEST,
            "validation_failed",
            "request failed validation",
        );
        e.body.fields = Some(fields);
        e
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(self.body)).into_response();
        if let Some(secs) = self.retry_after {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

/// `error: cause: cause ...`
fn chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        msg.push_str(": ");
        msg.push_str(&s.to_string());
        cur = s.source();
    }
    msg
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let msg = chain(&e);
        match e {
            GatewayError::Validation(fields) => ApiError::validation(fields),
            GatewayError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", msg),
            GatewayError::Conflict(_) => {
                ApiError::new(StatusCode::CONFLICT, "already_answered", msg)
            }
            GatewayError::Unavailable(_) => {
                let mut e =
                    ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable", msg);
                e.retry_after = Some(5);
                e
            }
            GatewayError::Engine(EngineError::Aborted { .. }) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "query_aborted", msg)
            }
            GatewayError::Engine(_) | GatewayError::Storage(_) | GatewayError::Incompatible(_) => {
                tracing::error!(error = %msg, "internal gateway error");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg)
            }
        }
    }
}

fn body_error(r: JsonRejection) -> ApiError {
    ApiError::validation(vec![ValidationError::new("body", r.body_text())])
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, GatewayError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn submit_query(
    State(state): State<AppState>,
    body: Result<Json<SubmitRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(request) = body.map_err(body_error)?;
    let gw = state.gateway.clone();
    let resp = blocking(move || gw.submit_query(request)).await?;
    Ok(Json(resp).into_response())
}

#[derive(Debug, Deserialize)]
pub struct FeedbackRequest {
    pub expert_answer: String,
}

async fn post_feedback(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(request) = body.map_err(body_error)?;
    let answer: Label = request.expert_answer.parse().map_err(|_| {
        ApiError::validation(vec![ValidationError::new(
            "expert_answer",
            "must be a label A-Z",
        )])
    })?;
    let gw = state.gateway.clone();
    let resp = blocking(move || gw.post_feedback(&id, answer)).await?;
    Ok(Json(resp).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ListParams {
    pub status: Option<EscalationStatus>,
    pub cursor: Option<String>,
    pub limit: Option<usize>,
}

async fn list_escalations(
    State(state): State<AppState>,
    params: Result<Query<ListParams>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(p) = params
        .map_err(|r| ApiError::validation(vec![ValidationError::new("query", r.body_text())]))?;
    let limit = p.limit.unwrap_or(DEFAULT_PAGE_SIZE);
    if !(1..=MAX_PAGE_SIZE).contains(&limit) {
        return Err(ApiError::validation(vec![ValidationError::new(
            "limit",
            format!("must be between 1 and {MAX_PAGE_SIZE}"),
        )]));
    }
    let page = state
        .gateway
        .list_escalations(p.status, p.cursor.as_deref(), limit)?;
    Ok(Json(page).into_response())
}

async fn get_escalation(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let e = state
        .gateway
        .get_escalation(&id)
        .ok_or_else(|| ApiError::from(GatewayError::NotFound(id)))?;
    Ok(Json(e).into_response())
}

async fn metrics(State(state): State<AppState>) -> Response {
    Json(state.gateway.metrics()).into_response()
}

async fn thresholds(State(state): State<AppState>) -> Response {
    Json(state.gateway.thresholds()).into_response()
}

async fn require_token(
    State(state): State<AppState>,
    req: Request,
    next: Next,
) -> Result<Response, ApiError> {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return Err(ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or invalid bearer token",
            ));
        }
    }
    Ok(next.run(req).await)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/query", post(submit_query))
        .route("/v1/escalations", get(list_escalations))
        .route("/v1/escalations/{id}", get(get_escalation))
        .route("/v1/escalations/{id}/feedback", post(post_feedback))
        .route("/v1/metrics", get(metrics))
        .route("/v1/thresholds", get(thresholds))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "gateway listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
