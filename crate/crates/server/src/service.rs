//! The service port: every request is handed to the core pipeline.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::extract::{ConnectInfo, DefaultBodyLimit, Request, State};
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::response::Response;
use axum::Router;
use datagate_core::pipeline::{GatewayError, RequestOutcome, ServiceRequest};

use crate::{AppState, MAX_BODY_BYTES};

pub fn service_router(state: Arc<AppState>) -> Router {
    Router::new()
        .fallback(handle)
        .layer(DefaultBodyLimit::disable())
        .with_state(state)
}

async fn handle(
    State(state): State<Arc<AppState>>,
    ConnectInfo(remote): ConnectInfo<SocketAddr>,
    request: Request,
) -> Response {
    let (parts, body) = request.into_parts();
    let mut req = ServiceRequest {
        method: parts.method.as_str().to_string(),
        path: parts.uri.path().to_string(),
        query: parts.uri.query().map(str::to_string),
        remote: remote.ip().to_string(),
        ..Default::default()
    };
    for (name, value) in &parts.headers {
        if let Ok(v) = value.to_str() {
            req.headers.insert(name.as_str().to_string(), v.to_string());
        }
    }
    let gateway = &state.gateway;
    let outcome = match to_bytes(body, MAX_BODY_BYTES).await {
        Ok(bytes) => {
            req.body = bytes.to_vec();
            gateway.handle(req).await
        }
        Err(e) => {
            gateway
                .reject(
                    req,
                    GatewayError::new(400, "bad_request", format!("unreadable request body: {e}")),
                )
                .await
        }
    };
    to_response(outcome)
}

pub(crate) fn to_response(outcome: RequestOutcome) -> Response {
    let mut response = Response::new(Body::from(outcome.body));
    *response.status_mut() =
        StatusCode::from_u16(outcome.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let headers = response.headers_mut();
    if let Ok(ct) = HeaderValue::from_str(&outcome.content_type) {
        headers.insert(axum::http::header::CONTENT_TYPE, ct);
    }
    if let Ok(id) = HeaderValue::from_str(&outcome.request_id) {
        headers.insert(HeaderName::from_static("x-request-id"), id);
    }
    if let Some(v) = outcome.project_version {
        headers.insert(HeaderName::from_static("x-project-version"), v.into());
    }
    for (name, value) in outcome.headers {
        if let (Ok(n), Ok(v)) = (
            HeaderName::from_bytes(name.as_bytes()),
            HeaderValue::from_str(&value),
        ) {
            headers.insert(n, v);
        }
    }
    response
}
