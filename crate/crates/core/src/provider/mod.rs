//! Datasource provider abstraction and the built-in providers.
//!
//! A [`DataSourceProvider`] turns a profile's [`ConnectionDescriptor`] into a
//! live [`ProviderConnection`], and plans endpoint invocations into
//! [`BoundQuery`]s. Providers pass query text to their backend unchanged.

mod embedded_sql;
pub mod generic_sql;
mod http;
mod mock;
pub mod payload;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use async_trait::async_trait;
use indexmap::IndexMap;
use thiserror::Error;

pub use embedded_sql::{EmbeddedSql, EMBEDDED_SQL_PROVIDER_ID};
pub use generic_sql::{GenericSqlProvider, SqlBackend};
pub use http::{HttpProvider, HTTP_PROVIDER_ID};
pub use mock::{MockProvider, MOCK_PROVIDER_ID};

use crate::model::{ConnectionDescriptor, Endpoint, EndpointKind, PayloadFormat};
use crate::template::{substitute, BoundQuery, SubstitutionMode, TemplateError};

/// One result record; field order is significant (CSV column order).
pub type Row = IndexMap<String, serde_json::Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultStatus {
    Ok,
    Empty,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderResult {
    pub status: ResultStatus,
    pub rows: Vec<Row>,
    pub content_type: String,
    /// When present, `rows` is empty.
    pub binary_payload: Option<Vec<u8>>,
    /// Only for update, delete and submit.
    pub affected_count: Option<u64>,
    /// Upstream HTTP status for pass-through providers.
    pub upstream_status: Option<u16>,
}

impl ProviderResult {
    pub fn rows(rows: Vec<Row>) -> Self {
        ProviderResult {
            status: if rows.is_empty() {
                ResultStatus::Empty
            } else {
                ResultStatus::Ok
            },
            rows,
            content_type: "application/json".into(),
            binary_payload: None,
            affected_count: None,
            upstream_status: None,
        }
    }

    pub fn affected(count: u64) -> Self {
        ProviderResult {
            status: ResultStatus::Ok,
            rows: Vec::new(),
            content_type: "application/json".into(),
            binary_payload: None,
            affected_count: Some(count),
            upstream_status: None,
        }
    }

    pub fn binary(bytes: Vec<u8>, content_type: impl Into<String>) -> Self {
        ProviderResult {
            status: if bytes.is_empty() {
                ResultStatus::Empty
            } else {
                ResultStatus::Ok
            },
            rows: Vec::new(),
            content_type: content_type.into(),
            binary_payload: Some(bytes),
            affected_count: None,
            upstream_status: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProviderDescriptor {
    pub provider_id: String,
    pub version: String,
    pub supported_kinds: BTreeSet<EndpointKind>,
    pub default_mode: SubstitutionMode,
    /// Query language label carried on [`BoundQuery::provider_language`].
    pub language: String,
}

impl ProviderDescriptor {
    pub fn new(provider_id: impl Into<String>, default_mode: SubstitutionMode, language: &str) -> Self {
        ProviderDescriptor {
            provider_id: provider_id.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            supported_kinds: EndpointKind::ALL.into_iter().collect(),
            default_mode,
            language: language.into(),
        }
    }
}

/// One provider invocation.
#[derive(Debug, Clone)]
pub struct ExecuteRequest {
    pub kind: EndpointKind,
    pub query: BoundQuery,
    /// Present iff `kind` is submit.
    pub payload: Option<Vec<u8>>,
    pub payload_format: PayloadFormat,
    /// Caller headers (lower-cased names) a provider may choose to forward.
    pub headers: BTreeMap<String, String>,
}

impl ExecuteRequest {
    pub fn new(kind: EndpointKind, query: BoundQuery) -> Self {
        ExecuteRequest {
            kind,
            query,
            payload: None,
            payload_format: PayloadFormat::Json,
            headers: BTreeMap::new(),
        }
    }

    pub fn with_payload(mut self, payload: Vec<u8>, format: PayloadFormat) -> Self {
        self.payload = Some(payload);
        self.payload_format = format;
        self
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("provider id '{0}' is already registered")]
    DuplicateProviderId(String),
    #[error("no provider registered as '{0}'")]
    UnknownProvider(String),
    #[error("provider '{provider}' does not support {kind} endpoints")]
    UnsupportedKind { provider: String, kind: EndpointKind },
    #[error("invalid connection descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("authentication with the backend failed: {0}")]
    AuthenticationFailed(String),
    #[error("query failed: {0}")]
    QueryError(String),
    #[error("backend did not answer in time")]
    Timeout,
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
}

/// A live, shareable backend connection. Implementations must tolerate
/// concurrent `execute` calls.
#[async_trait]
pub trait ProviderConnection: Send + Sync {
    async fn execute(&self, request: ExecuteRequest) -> Result<ProviderResult, ProviderError>;
}

#[async_trait]
pub trait DataSourceProvider: Send + Sync {
    fn descriptor(&self) -> &ProviderDescriptor;

    /// Rejects descriptors with keys or values this provider cannot use.
    fn validate(&self, _descriptor: &ConnectionDescriptor) -> Result<(), ProviderError> {
        Ok(())
    }

    async fn connect(
        &self,
        descriptor: &ConnectionDescriptor,
    ) -> Result<Arc<dyn ProviderConnection>, ProviderError>;

    /// Turns an endpoint and request parameters into a concrete query.
    fn plan(
        &self,
        endpoint: &Endpoint,
        params: &BTreeMap<String, String>,
    ) -> Result<BoundQuery, TemplateError> {
        let d = self.descriptor();
        let mut q = substitute(&endpoint.query_template, params, d.default_mode)?;
        q.provider_language = d.language.clone();
        Ok(q)
    }
}

/// Providers by id. Read-mostly; registration happens at startup.
#[derive(Default)]
pub struct ProviderRegistry {
    providers: RwLock<HashMap<String, Arc<dyn DataSourceProvider>>>,
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the embedded-SQL, HTTP and mock providers.
    pub fn with_builtins() -> Self {
        let reg = Self::new();
        reg.register(Arc::new(EmbeddedSql::provider()))
            .expect("fresh registry");
        reg.register(Arc::new(HttpProvider::new()))
            .expect("fresh registry");
        reg.register(Arc::new(MockProvider::new()))
            .expect("fresh registry");
        reg
    }

    pub fn register(
        &self,
        provider: Arc<dyn DataSourceProvider>,
    ) -> Result<Arc<dyn DataSourceProvider>, ProviderError> {
        let id = provider.descriptor().provider_id.clone();
        let mut map = self.providers.write().expect("provider registry poisoned");
        if map.contains_key(&id) {
            return Err(ProviderError::DuplicateProviderId(id));
        }
        map.insert(id, Arc::clone(&provider));
        Ok(provider)
    }

    pub fn resolve(&self, provider_id: &str) -> Option<Arc<dyn DataSourceProvider>> {
        self.providers
            .read()
            .expect("provider registry poisoned")
            .get(provider_id)
            .cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self
            .providers
            .read()
            .expect("provider registry poisoned")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }
}

/// Rejects descriptor keys outside `allowed`.
pub(crate) fn check_keys(
    descriptor: &ConnectionDescriptor,
    allowed: &[&str],
) -> Result<(), ProviderError> {
    match descriptor
        .properties
        .keys()
        .find(|k| !allowed.contains(&k.as_str()))
    {
        Some(k) => Err(ProviderError::InvalidDescriptor(format!(
            "unknown key '{k}' (accepted: {})",
            allowed.join(", ")
        ))),
        None => Ok(()),
    }
}
