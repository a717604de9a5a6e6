//! The per-request data-service pipeline.
//!
//! `route → authenticate → resolve → authorize → rate-limit → parameters →
//! payload modifiers → plan → query modifiers → execute → result modifiers →
//! format → audit`. Every request that reaches [`Gateway::handle`] produces
//! exactly one [`RequestOutcome`] and, with auditing on, one audit record.

use std::collections::BTreeMap;
use std::sync::{Arc, Weak};
use std::time::Instant;

use async_trait::async_trait;
use serde::Serialize;
use tracing::{debug, warn};

use crate::clock::Clock;
use crate::format::{rows_to_csv, rows_to_json};
use crate::model::{Endpoint, EndpointKind, OutputFormat, SubmitType};
use crate::modifier::{
    role_filter_from_attribute_filter, ChainTarget, EndpointInvoker, ModifierContext,
    ModifierError, ModifierRegistry, Stage, StageEntry,
};
use crate::provider::{ExecuteRequest, ProviderError, ProviderResult, ResultStatus};
use crate::registry::{LoadedProject, ProjectRegistry};
use crate::security::{authorize, AuthError, AuthzDecision, Authenticator, Principal, RateDecision, RateLimiter};
use crate::store::{AuditEntry, Auditor};
use crate::template::TemplateError;

pub const SERVICES_PREFIX: &str = "/services/";

/// `/services/{project}/{provider}/{kind}/{endpoint}`, decoded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RouteKey {
    pub project: String,
    pub provider: String,
    pub kind: EndpointKind,
    pub endpoint: String,
}

impl RouteKey {
    pub fn path(&self) -> String {
        format!(
            "{SERVICES_PREFIX}{}/{}/{}/{}",
            self.project,
            self.provider,
            self.kind.segment(),
            self.endpoint
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RouteError {
    NotFound,
    MethodMismatch { expected: &'static str },
}

/// Maps a method and path onto a route, purely syntactically.
pub fn route(method: &str, path: &str) -> Result<RouteKey, RouteError> {
    let rest = path.strip_prefix(SERVICES_PREFIX).ok_or(RouteError::NotFound)?;
    let mut parts = rest.split('/');
    let (Some(project), Some(provider), Some(kind), Some(endpoint), None) =
        (parts.next(), parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(RouteError::NotFound);
    };
    let kind = EndpointKind::from_segment(kind).ok_or(RouteError::NotFound)?;
    if ![project, provider, endpoint]
        .iter()
        .all(|s| crate::model::is_path_segment(s))
    {
        return Err(RouteError::NotFound);
    }
    if !method.eq_ignore_ascii_case(kind.verb()) {
        return Err(RouteError::MethodMismatch {
            expected: kind.verb(),
        });
    }
    Ok(RouteKey {
        project: project.to_string(),
        provider: provider.to_string(),
        kind,
        endpoint: endpoint.to_string(),
    })
}

/// An inbound service call, transport-independent.
#[derive(Debug, Clone, Default)]
pub struct ServiceRequest {
    pub method: String,
    /// Path without the query string.
    pub path: String,
    /// Raw query string without `?`.
    pub query: Option<String>,
    /// Lower-cased header names.
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
    pub remote: String,
}

impl ServiceRequest {
    pub fn new(method: &str, path_and_query: &str) -> Self {
        let (path, query) = match path_and_query.split_once('?') {
            Some((p, q)) => (p, Some(q.to_string())),
            None => (path_and_query, None),
        };
        ServiceRequest {
            method: method.to_string(),
            path: path.to_string(),
            query,
            remote: "-".into(),
            ..Default::default()
        }
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        self.headers.insert(name.to_ascii_lowercase(), value.to_string());
        self
    }

    pub fn body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }
}

#[derive(Debug, Clone)]
pub struct RequestOutcome {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
    /// Extra response headers, e.g. `Retry-After`.
    pub headers: Vec<(String, String)>,
    pub trace: Vec<StageEntry>,
    pub request_id: String,
    pub project_version: Option<u64>,
    pub audit_id: Option<u64>,
}

/// A pipeline failure, mapped onto an HTTP status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayError {
    pub status: u16,
    pub code: &'static str,
    pub detail: String,
    pub retry_after: Option<u64>,
    /// Set for output-chaining failures that must survive nesting unchanged.
    pub chain_cause: Option<ModifierError>,
}

impl GatewayError {
    pub fn new(status: u16, code: &'static str, detail: impl Into<String>) -> Self {
        GatewayError {
            status,
            code,
            detail: detail.into(),
            retry_after: None,
            chain_cause: None,
        }
    }

    pub fn not_found(detail: impl Into<String>) -> Self {
        Self::new(404, "not_found", detail)
    }

    fn from_auth(e: AuthError) -> Self {
        if e.is_unauthorized() {
            Self::new(401, "unauthorized", e.to_string())
        } else {
            Self::new(500, "internal", e.to_string())
        }
    }

    fn from_template(e: TemplateError) -> Self {
        Self::new(400, "bad_request", e.to_string())
    }

    fn from_modifier(e: ModifierError) -> Self {
        match &e {
            ModifierError::Rejected { .. } => Self::new(403, "forbidden", e.to_string()),
            ModifierError::BadInput { .. } => Self::new(400, "bad_request", e.to_string()),
            ModifierError::Inner { status, message } => {
                Self::new(*status, code_for(*status), message.clone())
            }
            ModifierError::ChainDepthExceeded { .. } | ModifierError::TargetNotFound(_) => {
                let mut g = Self::new(500, "internal", e.to_string());
                g.chain_cause = Some(e);
                g
            }
            ModifierError::Failure { .. } => Self::new(500, "internal", e.to_string()),
        }
    }

    fn from_provider(e: ProviderError, project: &LoadedProject) -> Self {
        let detail = project.scrub(&e.to_string());
        match e {
            ProviderError::Timeout => Self::new(408, "timeout", detail),
            ProviderError::InvalidPayload(_) => Self::new(400, "bad_request", detail),
            ProviderError::QueryError(_)
            | ProviderError::ConnectionRefused(_)
            | ProviderError::ConnectionLost(_)
            | ProviderError::AuthenticationFailed(_) => Self::new(502, "bad_gateway", detail),
            _ => Self::new(500, "internal", detail),
        }
    }
}

fn code_for(status: u16) -> &'static str {
    match status {
        400 => "bad_request",
        401 => "unauthorized",
        403 => "forbidden",
        404 => "not_found",
        405 => "method_not_allowed",
        408 => "timeout",
        429 => "throttled",
        502 => "bad_gateway",
        _ => "internal",
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    detail: &'a str,
    #[serde(rename = "requestId")]
    request_id: &'a str,
}

/// Settings the pipeline needs from the server configuration.
#[derive(Debug, Clone)]
pub struct GatewaySettings {
    pub enable_authorization: bool,
    pub instance_name: String,
}

pub struct Gateway {
    settings: GatewaySettings,
    registry: Arc<ProjectRegistry>,
    modifiers: Arc<ModifierRegistry>,
    auth: Arc<Authenticator>,
    limiter: Arc<RateLimiter>,
    auditor: Arc<Auditor>,
    clock: Arc<dyn Clock>,
    this: Weak<Gateway>,
}

/// Everything a successful execution produced.
struct Executed {
    result: ProviderResult,
}

impl Gateway {
    pub fn new(
        settings: GatewaySettings,
        registry: Arc<ProjectRegistry>,
        auth: Arc<Authenticator>,
        limiter: Arc<RateLimiter>,
        auditor: Arc<Auditor>,
    ) -> Arc<Self> {
        let modifiers = Arc::clone(registry.modifiers());
        let clock = Arc::clone(auth.clock());
        Arc::new_cyclic(|this| Gateway {
            settings,
            registry,
            modifiers,
            auth,
            limiter,
            auditor,
            clock,
            this: this.clone(),
        })
    }

    pub fn registry(&self) -> &Arc<ProjectRegistry> {
        &self.registry
    }

    pub fn authenticator(&self) -> &Arc<Authenticator> {
        &self.auth
    }

    pub fn limiter(&self) -> &Arc<RateLimiter> {
        &self.limiter
    }

    pub fn auditor(&self) -> &Arc<Auditor> {
        &self.auditor
    }

    pub fn settings(&self) -> &GatewaySettings {
        &self.settings
    }

    /// Runs one service request through the full pipeline.
    pub async fn handle(&self, req: ServiceRequest) -> RequestOutcome {
        let started = Instant::now();
        let mut trace = Vec::new();
        let mut subject: Option<String> = None;
        let mut version = None;
        let result = self
            .process(&req, &mut trace, &mut subject, &mut version)
            .await;
        self.finish(req, started, result, trace, subject, version).await
    }

    /// Answers and audits a request the transport refused before it could
    /// enter the pipeline, e.g. an oversized body.
    pub async fn reject(&self, req: ServiceRequest, error: GatewayError) -> RequestOutcome {
        self.finish(req, Instant::now(), Err(error), Vec::new(), None, None)
            .await
    }

    async fn finish(
        &self,
        req: ServiceRequest,
        started: Instant,
        result: Result<(String, Vec<u8>), GatewayError>,
        trace: Vec<StageEntry>,
        subject: Option<String>,
        version: Option<u64>,
    ) -> RequestOutcome {
        let request_id = uuid::Uuid::new_v4().simple().to_string();
        let mut headers = Vec::new();
        let (status, content_type, body) = match result {
            Ok((content_type, body)) => (200, content_type, body),
            Err(e) => {
                if e.status >= 500 {
                    warn!(request_id = %request_id, status = e.status, detail = %e.detail, "request failed");
                } else {
                    debug!(request_id = %request_id, status = e.status, detail = %e.detail, "request rejected");
                }
                if e.status == 401 {
                    headers.push((
                        "WWW-Authenticate".to_string(),
                        format!("Bearer realm=\"{}\"", self.settings.instance_name),
                    ));
                }
                if let Some(secs) = e.retry_after {
                    headers.push(("Retry-After".to_string(), secs.to_string()));
                }
                let body = serde_json::to_vec(&ErrorBody {
                    error: e.code,
                    detail: &e.detail,
                    request_id: &request_id,
                })
                .expect("error body serializes");
                (e.status, "application/json".to_string(), body)
            }
        };
        let latency = started.elapsed();
        let audit_id = match self
            .auditor
            .record(AuditEntry {
                subject: subject.unwrap_or_else(|| "-".into()),
                method: req.method,
                path: req.path,
                status,
                latency_micros: latency.as_micros() as u64,
                remote: req.remote,
                bytes: body.len() as u64,
            })
            .await
        {
            Ok(id) => id,
            Err(e) => {
                warn!(request_id = %request_id, error = %e, "audit append failed");
                None
            }
        };
        RequestOutcome {
            status,
            content_type,
            body,
            headers,
            trace,
            request_id,
            project_version: version,
            audit_id,
        }
    }

    async fn process(
        &self,
        req: &ServiceRequest,
        trace: &mut Vec<StageEntry>,
        subject: &mut Option<String>,
        version: &mut Option<u64>,
    ) -> Result<(String, Vec<u8>), GatewayError> {
        let key = route(&req.method, &req.path).map_err(|e| match e {
            RouteError::NotFound => GatewayError::not_found(format!("no service at {}", req.path)),
            RouteError::MethodMismatch { expected } => GatewayError::new(
                405,
                "method_not_allowed",
                format!("{} endpoints are invoked with {expected}", req.path.split('/').nth(4).unwrap_or("")),
            ),
        })?;

        let principal = self.auth.authenticate(&req.headers).map_err(GatewayError::from_auth)?;
        push(trace, Stage::Authenticate, "");
        *subject = Some(principal.subject.clone());

        let project = self
            .registry
            .get(&key.project)
            .ok_or_else(|| GatewayError::not_found(format!("no project '{}'", key.project)))?;
        *version = Some(project.version);
        let endpoint = project
            .endpoint(&key.provider, key.kind, &key.endpoint)
            .ok_or_else(|| GatewayError::not_found(format!("no service at {}", req.path)))?;

        self.check_access(&principal, endpoint)?;
        push(trace, Stage::Authorize, "");

        if let RateDecision::Throttled { retry_after_secs } =
            self.limiter.check(&principal, self.clock.now())
        {
            let mut e = GatewayError::new(
                429,
                "throttled",
                format!("rate limit exceeded; retry in {retry_after_secs} s"),
            );
            e.retry_after = Some(retry_after_secs);
            return Err(e);
        }
        push(trace, Stage::RateLimit, "");

        let (params, payload) = request_params(req, endpoint)?;
        let executed = self
            .execute(
                &project,
                &key,
                endpoint,
                &principal,
                &req.headers,
                params,
                payload,
                0,
                trace,
            )
            .await?;
        let out = render(endpoint, executed.result);
        push(trace, Stage::Format, "");
        Ok(out)
    }

    fn check_access(&self, principal: &Principal, endpoint: &Endpoint) -> Result<(), GatewayError> {
        match authorize(principal, endpoint, self.settings.enable_authorization) {
            AuthzDecision::Allow => Ok(()),
            AuthzDecision::Deny(why) => Err(GatewayError::new(403, "forbidden", why)),
        }
    }

    /// Steps from parameter binding through the result modifiers.
    #[allow(clippy::too_many_arguments)]
    async fn execute(
        &self,
        project: &Arc<LoadedProject>,
        key: &RouteKey,
        endpoint: &Endpoint,
        principal: &Principal,
        headers: &BTreeMap<String, String>,
        params: BTreeMap<String, String>,
        payload: Option<Vec<u8>>,
        depth: u32,
        trace: &mut Vec<StageEntry>,
    ) -> Result<Executed, GatewayError> {
        let provider = project
            .providers
            .get(&key.provider)
            .ok_or_else(|| GatewayError::not_found("provider not loaded"))?;
        let connection = project
            .connections
            .get(&key.provider)
            .ok_or_else(|| GatewayError::not_found("provider not loaded"))?;

        let mut ctx = ModifierContext::new(principal, endpoint, headers);
        ctx.project = &key.project;
        ctx.profile = &key.provider;
        ctx.depth = depth;
        ctx.invoker = self
            .this
            .upgrade()
            .map(|g| g as Arc<dyn EndpointInvoker>);
        ctx.trace = std::mem::take(trace);

        let outcome = self
            .execute_in(project, key, endpoint, provider.as_ref(), connection.as_ref(), params, payload, &mut ctx)
            .await;
        *trace = std::mem::take(&mut ctx.trace);
        outcome
    }

    #[allow(clippy::too_many_arguments)]
    async fn execute_in(
        &self,
        project: &Arc<LoadedProject>,
        key: &RouteKey,
        endpoint: &Endpoint,
        provider: &dyn crate::provider::DataSourceProvider,
        connection: &dyn crate::provider::ProviderConnection,
        params: BTreeMap<String, String>,
        payload: Option<Vec<u8>>,
        ctx: &mut ModifierContext<'_>,
    ) -> Result<Executed, GatewayError> {
        let payload = match payload {
            Some(p) if key.kind == EndpointKind::Submit => Some(
                self.modifiers
                    .apply_payload_chain(&endpoint.payload_modifiers, p, ctx)
                    .map_err(GatewayError::from_modifier)?,
            ),
            _ => None,
        };

        let query = provider
            .plan(endpoint, &params)
            .map_err(GatewayError::from_template)?;

        let filter = if self.settings.enable_authorization {
            endpoint
                .visibility
                .as_ref()
                .and_then(|v| v.attribute_filter.as_ref())
                .map(role_filter_from_attribute_filter)
        } else {
            None
        };
        let query = match &filter {
            Some(f) => self
                .modifiers
                .apply_query_chain(std::slice::from_ref(f), query, ctx)
                .map_err(GatewayError::from_modifier)?,
            None => query,
        };
        let query = self
            .modifiers
            .apply_query_chain(&endpoint.query_modifiers, query, ctx)
            .map_err(GatewayError::from_modifier)?;

        let mut request = ExecuteRequest::new(key.kind, query);
        request.headers = ctx.headers.clone();
        if let Some(p) = payload {
            request = request.with_payload(p, endpoint.payload_format());
        }
        let result = tokio::time::timeout(endpoint.timeout(), connection.execute(request))
            .await
            .map_err(|_| GatewayError::new(408, "timeout", "backend did not answer in time"))?
            .map_err(|e| GatewayError::from_provider(e, project))?;
        ctx.record(Stage::ProviderExecute, "");
        if result.status == ResultStatus::Error {
            let upstream = result
                .upstream_status
                .map_or_else(|| "an error".to_string(), |s| format!("status {s}"));
            return Err(GatewayError::new(
                502,
                "bad_gateway",
                format!("backend returned {upstream}"),
            ));
        }

        let result = self
            .modifiers
            .apply_result_chain(&endpoint.result_modifiers, result, ctx)
            .await
            .map_err(GatewayError::from_modifier)?;
        Ok(Executed { result })
    }
}

fn push(trace: &mut Vec<StageEntry>, stage: Stage, id: &str) {
    trace.push(StageEntry {
        stage,
        id: id.to_string(),
    });
}

/// Bind parameters and the submit payload.
///
/// URL query parameters come first; for POST and PUT with a form body the
/// form fields override them. Repeated names keep their last value. A form
/// submit carries its payload in the `payload` field; any other submit body
/// is the payload itself.
fn request_params(
    req: &ServiceRequest,
    endpoint: &Endpoint,
) -> Result<(BTreeMap<String, String>, Option<Vec<u8>>), GatewayError> {
    let mut params = BTreeMap::new();
    if let Some(q) = &req.query {
        for (k, v) in form_urlencoded::parse(q.as_bytes()) {
            params.insert(k.into_owned(), v.into_owned());
        }
    }
    let is_form = req
        .headers
        .get("content-type")
        .is_some_and(|ct| {
            ct.split(';')
                .next()
                .is_some_and(|m| m.trim().eq_ignore_ascii_case("application/x-www-form-urlencoded"))
        });
    let submit = endpoint.kind == EndpointKind::Submit;
    let mut payload = None;
    if is_form && matches!(endpoint.kind, EndpointKind::Submit | EndpointKind::Update) {
        for (k, v) in form_urlencoded::parse(&req.body) {
            if submit && k == "payload" {
                payload = Some(v.into_owned().into_bytes());
            } else {
                params.insert(k.into_owned(), v.into_owned());
            }
        }
    } else if submit {
        payload = Some(req.body.clone());
    }
    if submit && payload.is_none() {
        if endpoint.submit_type == Some(SubmitType::FormData) {
            return Err(GatewayError::new(
                400,
                "bad_request",
                "form submission has no 'payload' field",
            ));
        }
        payload = Some(Vec::new());
    }
    Ok((params, payload))
}

/// Encodes a result per the endpoint's output format.
fn render(endpoint: &Endpoint, result: ProviderResult) -> (String, Vec<u8>) {
    if let Some(bytes) = result.binary_payload {
        return (result.content_type, bytes);
    }
    let rows = if result.rows.is_empty() && endpoint.kind.is_mutating() {
        match result.affected_count {
            Some(n) => {
                let mut row = crate::provider::Row::new();
                row.insert("affectedCount".into(), n.into());
                vec![row]
            }
            None => Vec::new(),
        }
    } else {
        result.rows
    };
    match endpoint.output_format {
        OutputFormat::Csv => ("text/csv".into(), rows_to_csv(&rows)),
        OutputFormat::Json | OutputFormat::Raw => ("application/json".into(), rows_to_json(&rows)),
    }
}

#[async_trait]
impl EndpointInvoker for Gateway {
    async fn invoke(
        &self,
        target: &ChainTarget,
        params: BTreeMap<String, String>,
        principal: &Principal,
        headers: &BTreeMap<String, String>,
        depth: u32,
    ) -> Result<ProviderResult, ModifierError> {
        let project = self
            .registry
            .get(&target.project)
            .ok_or_else(|| ModifierError::TargetNotFound(target.to_string()))?;
        let endpoint = project
            .endpoint(&target.profile, target.kind, &target.endpoint)
            .ok_or_else(|| ModifierError::TargetNotFound(target.to_string()))?;
        let inner = |e: GatewayError| ModifierError::Inner {
            status: e.status,
            message: e.detail,
        };
        self.check_access(principal, endpoint).map_err(inner)?;
        let key = RouteKey {
            project: target.project.clone(),
            provider: target.profile.clone(),
            kind: target.kind,
            endpoint: target.endpoint.clone(),
        };
        let payload = (target.kind == EndpointKind::Submit).then(Vec::new);
        let mut trace = Vec::new();
        let executed = self
            .execute(&project, &key, endpoint, principal, headers, params, payload, depth, &mut trace)
            .await
            .map_err(|mut e| e.chain_cause.take().unwrap_or_else(|| inner(e)))?;
        Ok(executed.result)
    }
}
