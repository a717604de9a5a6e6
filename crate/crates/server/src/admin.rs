//! The console port's administrative REST API.
//!
//! Callers authenticate exactly like service callers. Administrators may do
//! everything; API developers may also manage projects; other callers see
//! and manage only their own users, keys and audit records. With
//! authentication disabled every caller is treated as an administrator.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use datagate_core::model::serialize_project_file;
use datagate_core::modifier::ModifierStage;
use datagate_core::registry::ProjectError;
use datagate_core::security::{
    issue_api_key, Principal, PrincipalSource, ROLE_ADMIN, ROLE_DEVELOPER,
};
use datagate_core::store::{AuditFilter, AuditStore, CredentialStore, Page, StoreError, UserRecord};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::AppState;

const MAX_AUDIT_PAGE: u64 = 1000;

pub fn admin_router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/admin/status", get(status))
        .route("/admin/projects", get(list_projects).post(create_project))
        .route(
            "/admin/projects/{name}",
            get(get_project).put(put_project).delete(delete_project),
        )
        .route("/admin/users", get(list_users).post(put_user))
        .route("/admin/users/{subject}/activate", post(activate))
        .route("/admin/users/{subject}/deactivate", post(deactivate))
        .route("/admin/keys", get(list_keys).post(issue_key))
        .route("/admin/keys/{fingerprint}", delete(revoke_key))
        .route("/admin/jwt", post(issue_jwt))
        .route("/admin/audit", get(query_audit))
        .route("/admin/events", get(events))
        .fallback(not_found);
    let api = match &state.config.console_assets_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.with_state(state)
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            detail: detail.into(),
        }
    }

    fn forbidden(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", detail)
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": self.code, "detail": self.detail})),
        )
            .into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            StoreError::Conflict(_) => Self::new(StatusCode::CONFLICT, "conflict", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl From<ProjectError> for ApiError {
    fn from(e: ProjectError) -> Self {
        match e {
            ProjectError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            ProjectError::Io(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
            ProjectError::NameConflict { .. } => Self::new(StatusCode::CONFLICT, "conflict", e.to_string()),
            _ => Self::bad_request(e.to_string()),
        }
    }
}

type ApiResult<T = Response> = Result<T, ApiError>;

fn header_map(headers: &HeaderMap) -> BTreeMap<String, String> {
    headers
        .iter()
        .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
        .collect()
}

fn caller(state: &AppState, headers: &HeaderMap) -> ApiResult<Principal> {
    let auth = state.gateway.authenticator();
    if !auth.is_enabled() {
        return Ok(Principal {
            subject: "anonymous".into(),
            roles: BTreeSet::from([ROLE_ADMIN.to_string()]),
            source: PrincipalSource::Anonymous,
            expires_at: None,
        });
    }
    auth.authenticate(&header_map(headers)).map_err(|e| {
        if e.is_unauthorized() {
            ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", e.to_string())
        } else {
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
        }
    })
}

fn require_admin(p: &Principal) -> ApiResult<()> {
    if p.is_admin() {
        Ok(())
    } else {
        Err(ApiError::forbidden("administrator role required"))
    }
}

fn require_developer(p: &Principal) -> ApiResult<()> {
    if p.is_admin() || p.has_role(ROLE_DEVELOPER) {
        Ok(())
    } else {
        Err(ApiError::forbidden("administrator or api_developer role required"))
    }
}

/// The subject an action targets; only administrators may act for others.
fn target_subject(p: &Principal, requested: Option<String>) -> ApiResult<String> {
    match requested {
        Some(s) if s != p.subject => {
            require_admin(p)?;
            Ok(s)
        }
        _ => Ok(p.subject.clone()),
    }
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such admin resource")
}

async fn status(State(state): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult {
    let p = caller(&state, &headers)?;
    let c = &state.config;
    let g = &state.gateway;
    let modifiers = g.registry().modifiers();
    Ok(Json(json!({
        "instanceName": c.instance_name,
        "version": env!("CARGO_PKG_VERSION"),
        "uptimeSeconds": state.started.elapsed().as_secs(),
        "servicePort": state.service_addr.port(),
        "consolePort": state.console_addr.port(),
        "caller": {"subject": p.subject, "roles": p.roles},
        "authentication": {
            "enabled": c.enable_authentication,
            "protocol": c.authentication_protocol.as_str(),
        },
        "authorization": {"enabled": c.enable_authorization},
        "audit": {
            "enabled": g.auditor().is_enabled(),
            "mode": g.auditor().mode(),
            "flushIntervalMillis": c.audit_flush_interval.as_millis() as u64,
            "stats": g.auditor().stats(),
        },
        "rateLimit": c.rate_limit.as_ref().map(|r| json!({
            "requestsPerWindow": r.requests_per_window,
            "windowSeconds": r.window_seconds,
            "scope": r.scope,
            "perRoleOverrides": r.per_role_overrides,
        })),
        "projects": g.registry().snapshot().len(),
        "providers": g.registry().providers().ids(),
        "modifiers": {
            "query": modifiers.ids(ModifierStage::Query),
            "result": modifiers.ids(ModifierStage::Result),
            "payload": modifiers.ids(ModifierStage::Payload),
        },
    }))
    .into_response())
}

async fn list_projects(State(state): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult {
    caller(&state, &headers)?;
    Ok(Json(state.gateway.registry().summaries()).into_response())
}

#[derive(Deserialize)]
struct NameQuery {
    name: Option<String>,
}

async fn create_project(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<NameQuery>,
    body: Bytes,
) -> ApiResult {
    let p = caller(&state, &headers)?;
    require_developer(&p)?;
    let default = q.name.unwrap_or_default();
    let (name, version) = state.gateway.registry().deploy(&body, &default).await?;
    Ok(Json(json!({"name": name, "version": version})).into_response())
}

async fn put_project(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(name): Path<String>,
    body: Bytes,
) -> ApiResult {
    let p = caller(&state, &headers)?;
    require_developer(&p)?;
    let parsed = datagate_core::model::parse_project_file(&body, &name)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    if parsed.name != name {
        return Err(ApiError::bad_request(format!(
            "document names project '{}' but the URL names '{name}'",
            parsed.name
        )));
    }
    let (name, version) = state.gateway.registry().deploy(&body, &name).await?;
    Ok(Json(json!({"name": name, "version": version})).into_response())
}

async fn get_project(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(name): Path<String>,
) -> ApiResult {
    caller(&state, &headers)?;
    let loaded = state
        .gateway
        .registry()
        .get(&name)
        .ok_or_else(|| ApiError::from(ProjectError::NotFound(name)))?;
    Ok((
        [
            (axum::http::header::CONTENT_TYPE, "application/json".to_string()),
            (
                axum::http::HeaderName::from_static("x-project-version"),
                loaded.version.to_string(),
            ),
        ],
        serialize_project_file(&loaded.project),
    )
        .into_response())
}

async fn delete_project(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(name): Path<String>,
) -> ApiResult {
    let p = caller(&state, &headers)?;
    require_developer(&p)?;
    state.gateway.registry().undeploy(&name).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn list_users(State(state): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult {
    let p = caller(&state, &headers)?;
    let users = if p.is_admin() {
        state.store.list_users()?
    } else {
        match state.store.get_user(&p.subject) {
            Ok(u) => vec![u],
            Err(StoreError::NotFound(_)) => Vec::new(),
            Err(e) => return Err(e.into()),
        }
    };
    Ok(Json(users).into_response())
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct UserBody {
    subject: String,
    #[serde(default)]
    roles: BTreeSet<String>,
    #[serde(default = "yes")]
    active: bool,
}

fn yes() -> bool {
    true
}

fn json_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

async fn put_user(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let p = caller(&state, &headers)?;
    require_admin(&p)?;
    let b: UserBody = json_body(&body)?;
    if b.subject.is_empty() {
        return Err(ApiError::bad_request("subject must not be empty"));
    }
    let created_at = match state.store.get_user(&b.subject) {
        Ok(u) => u.created_at,
        Err(StoreError::NotFound(_)) => Utc::now(),
        Err(e) => return Err(e.into()),
    };
    let user = UserRecord {
        subject: b.subject,
        roles: b.roles,
        active: b.active,
        created_at,
    };
    state.gateway.authenticator().put_user(&user)?;
    Ok(Json(user).into_response())
}

async fn set_active(state: &AppState, headers: &HeaderMap, subject: &str, active: bool) -> ApiResult {
    let p = caller(state, headers)?;
    require_admin(&p)?;
    let user = state.gateway.authenticator().set_active(subject, active)?;
    Ok(Json(user).into_response())
}

async fn activate(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(subject): Path<String>,
) -> ApiResult {
    set_active(&state, &headers, &subject, true).await
}

async fn deactivate(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(subject): Path<String>,
) -> ApiResult {
    set_active(&state, &headers, &subject, false).await
}

#[derive(Deserialize)]
struct SubjectQuery {
    subject: Option<String>,
}

async fn list_keys(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<SubjectQuery>,
) -> ApiResult {
    let p = caller(&state, &headers)?;
    let keys = if p.is_admin() {
        state.store.list_api_keys(q.subject.as_deref())?
    } else {
        target_subject(&p, q.subject)?;
        state.store.list_api_keys(Some(&p.subject))?
    };
    Ok(Json(keys).into_response())
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct IssueBody {
    subject: Option<String>,
    roles: Option<BTreeSet<String>>,
    ttl_seconds: Option<u64>,
}

fn issue_body(body: &[u8]) -> ApiResult<IssueBody> {
    if body.iter().all(u8::is_ascii_whitespace) {
        Ok(IssueBody::default())
    } else {
        json_body(body)
    }
}

async fn issue_key(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let p = caller(&state, &headers)?;
    let b = issue_body(&body)?;
    let subject = target_subject(&p, b.subject)?;
    if b.roles.is_some() {
        require_admin(&p)?;
    }
    let issued = issue_api_key(
        state.store.as_ref(),
        &subject,
        b.roles,
        b.ttl_seconds.map(Duration::from_secs),
        state.gateway.authenticator().clock().now(),
    )?;
    state.gateway.authenticator().cache().invalidate_subject(&subject);
    Ok((StatusCode::CREATED, Json(issued)).into_response())
}

async fn revoke_key(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(fingerprint): Path<String>,
) -> ApiResult {
    let p = caller(&state, &headers)?;
    if !p.is_admin() {
        let own = state.store.list_api_keys(Some(&p.subject))?;
        if !own.iter().any(|k| k.fingerprint == fingerprint) {
            return Err(ApiError::forbidden("only administrators may revoke other users' keys"));
        }
    }
    let rec = state.gateway.authenticator().revoke_key(&fingerprint)?;
    Ok(Json(rec).into_response())
}

const DEFAULT_JWT_TTL: u64 = 3600;

async fn issue_jwt(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let p = caller(&state, &headers)?;
    let b = issue_body(&body)?;
    let subject = target_subject(&p, b.subject)?;
    let roles = match b.roles {
        Some(r) => {
            require_admin(&p)?;
            r
        }
        None if subject == p.subject => p.roles.clone(),
        None => match state.store.get_user(&subject) {
            Ok(u) => u.roles,
            Err(StoreError::NotFound(_)) => BTreeSet::new(),
            Err(e) => return Err(e.into()),
        },
    };
    let issuer = state.issuer.as_ref().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "unavailable",
            "no JWT signing key is configured",
        )
    })?;
    let ttl = Duration::from_secs(b.ttl_seconds.unwrap_or(DEFAULT_JWT_TTL));
    let now = state.gateway.authenticator().clock().now();
    let token = issuer
        .issue(&subject, &roles, ttl, now)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let expires_at = now + chrono::Duration::from_std(ttl).unwrap_or(chrono::Duration::MAX);
    Ok((
        StatusCode::CREATED,
        Json(json!({"token": token, "subject": subject, "roles": roles, "expiresAt": expires_at})),
    )
        .into_response())
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct AuditQuery {
    subject: Option<String>,
    path_prefix: Option<String>,
    from: Option<DateTime<Utc>>,
    to: Option<DateTime<Utc>>,
    status: Option<u16>,
    offset: Option<u64>,
    limit: Option<u64>,
}

async fn query_audit(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<AuditQuery>,
) -> ApiResult {
    let p = caller(&state, &headers)?;
    let subject = if p.is_admin() {
        q.subject
    } else {
        Some(target_subject(&p, q.subject)?)
    };
    let filter = AuditFilter {
        subject,
        path_prefix: q.path_prefix,
        from: q.from,
        to: q.to,
        status: q.status,
    };
    let page = Page::new(
        q.offset.unwrap_or(0),
        q.limit.unwrap_or(100).clamp(1, MAX_AUDIT_PAGE),
    );
    let records = state.store.query_audit(&filter, page)?;
    let total = state.store.count_audit(&filter)?;
    Ok(Json(json!({
        "total": total,
        "offset": page.offset,
        "limit": page.limit,
        "records": records,
    }))
    .into_response())
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

async fn events(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<EventsQuery>,
) -> ApiResult {
    let p = caller(&state, &headers)?;
    require_developer(&p)?;
    let events: Vec<Value> = state
        .gateway
        .registry()
        .recent_events(q.after.unwrap_or(0))
        .into_iter()
        .map(|e| serde_json::to_value(e).expect("event serializes"))
        .collect();
    Ok(Json(events).into_response())
}
