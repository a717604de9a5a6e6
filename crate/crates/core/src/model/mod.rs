//! Declarative data model for projects, data providers, endpoints and the
//! server configuration, plus reading and writing their JSON files.
//!
//! All values here are immutable once built. A project is only ever changed by
//! replacing it as a whole (see [`crate::registry`]).

mod config;
mod project;
pub mod relaxed;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    parse_server_config, AuditMode, AuthProtocol, JwtSettings, Protocol, RateLimitPolicy,
    RateLimitScope, ServerConfig,
};
pub use project::{parse_project_file, serialize_project_file};

use crate::template::QueryTemplate;

/// Errors raised while reading project files and server configuration.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    MalformedDocument {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error(
        "endpoint '{endpoint}': declared bind variables {declared:?} do not match template variables {extracted:?}"
    )]
    TemplateMismatch {
        endpoint: String,
        declared: Vec<String>,
        extracted: Vec<String>,
    },
}

impl ModelError {
    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        ModelError::SchemaViolation(msg.into())
    }

    pub(crate) fn from_json(err: serde_json::Error) -> Self {
        use serde_json::error::Category;
        match err.classify() {
            Category::Syntax | Category::Eof | Category::Io => ModelError::MalformedDocument {
                line: err.line(),
                column: err.column(),
                message: err.to_string(),
            },
            Category::Data => ModelError::SchemaViolation(err.to_string()),
        }
    }

    /// 1-based line of the error, when the error points into the document.
    pub fn line(&self) -> Option<usize> {
        match self {
            ModelError::MalformedDocument { line, .. } if *line > 0 => Some(*line),
            _ => None,
        }
    }
}

/// The four endpoint kinds and their fixed HTTP verb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Query,
    Submit,
    Update,
    Delete,
}

impl EndpointKind {
    pub const ALL: [EndpointKind; 4] = [
        EndpointKind::Query,
        EndpointKind::Submit,
        EndpointKind::Update,
        EndpointKind::Delete,
    ];

    /// URL path segment naming this kind.
    pub fn segment(self) -> &'static str {
        match self {
            EndpointKind::Query => "query",
            EndpointKind::Submit => "submit",
            EndpointKind::Update => "update",
            EndpointKind::Delete => "delete",
        }
    }

    /// The only HTTP method that may invoke endpoints of this kind.
    pub fn verb(self) -> &'static str {
        match self {
            EndpointKind::Query => "GET",
            EndpointKind::Submit => "POST",
            EndpointKind::Update => "PUT",
            EndpointKind::Delete => "DELETE",
        }
    }

    pub fn from_segment(segment: &str) -> Option<Self> {
        EndpointKind::ALL.into_iter().find(|k| k.segment() == segment)
    }

    pub fn from_verb(verb: &str) -> Option<Self> {
        EndpointKind::ALL
            .into_iter()
            .find(|k| k.verb().eq_ignore_ascii_case(verb))
    }

    pub fn is_mutating(self) -> bool {
        self != EndpointKind::Query
    }

    /// Project-file key of the endpoint map for this kind.
    pub fn map_key(self) -> &'static str {
        match self {
            EndpointKind::Query => "queryEndpoints",
            EndpointKind::Submit => "submitEndpoints",
            EndpointKind::Update => "updateEndpoints",
            EndpointKind::Delete => "deleteEndpoints",
        }
    }
}

impl fmt::Display for EndpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.segment())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OutputFormat {
    #[default]
    #[serde(rename = "json", alias = "JSON")]
    Json,
    #[serde(rename = "csv", alias = "CSV")]
    Csv,
    #[serde(rename = "raw", alias = "RAW")]
    Raw,
}

/// How a submit request carries its payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SubmitType {
    FormData,
    Raw,
}

/// Record format of a submit payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PayloadFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for PayloadFormat {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "JSON" => Ok(PayloadFormat::Json),
            "CSV" => Ok(PayloadFormat::Csv),
            other => Err(ModelError::schema(format!(
                "unsupported inputType '{other}' (expected CSV or JSON)"
            ))),
        }
    }
}

/// A configured modifier instance inside an endpoint's chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModifierRef {
    pub id: String,
    pub config: BTreeMap<String, String>,
}

impl ModifierRef {
    pub fn new(id: impl Into<String>) -> Self {
        ModifierRef {
            id: id.into(),
            config: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.config.insert(key.into(), value.into());
        self
    }
}

/// Entry-level filter: only rows whose `attribute` is in `allowed_values`
/// are visible, except to principals holding one of `exempt_roles`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AttributeFilter {
    pub attribute: String,
    #[serde(default)]
    pub param: Option<String>,
    pub allowed_values: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub exempt_roles: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AccessRule {
    /// Empty means any authenticated principal.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub allowed_roles: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_filter: Option<AttributeFilter>,
}

/// Backend connection properties, interpreted by the provider.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConnectionDescriptor {
    pub properties: BTreeMap<String, String>,
    pub initialize: bool,
}

impl ConnectionDescriptor {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.properties.get(key).map(String::as_str)
    }

    /// Returns a copy with `${ENV:NAME}` references replaced by the
    /// corresponding environment variables.
    pub fn resolve_env(&self) -> Result<ConnectionDescriptor, String> {
        self.resolve_with(|name| std::env::var(name).ok())
    }

    pub fn resolve_with(
        &self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<ConnectionDescriptor, String> {
        let mut properties = BTreeMap::new();
        for (key, value) in &self.properties {
            properties.insert(key.clone(), expand_env(value, &lookup)?);
        }
        Ok(ConnectionDescriptor {
            properties,
            initialize: self.initialize,
        })
    }
}

fn expand_env(value: &str, lookup: &impl Fn(&str) -> Option<String>) -> Result<String, String> {
    const OPEN: &str = "${ENV:";
    let mut out = String::with_capacity(value.len());
    let mut rest = value;
    while let Some(start) = rest.find(OPEN) {
        out.push_str(&rest[..start]);
        let after = &rest[start + OPEN.len()..];
        let end = after
            .find('}')
            .ok_or_else(|| format!("unterminated environment reference in '{value}'"))?;
        let name = &after[..end];
        let resolved =
            lookup(name).ok_or_else(|| format!("environment variable '{name}' is not set"))?;
        out.push_str(&resolved);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// One named API over a data provider.
#[derive(Debug, Clone, PartialEq)]
pub struct Endpoint {
    pub name: String,
    pub kind: EndpointKind,
    pub query_template: QueryTemplate,
    pub output_format: OutputFormat,
    pub metadata: BTreeMap<String, String>,
    pub query_modifiers: Vec<ModifierRef>,
    pub result_modifiers: Vec<ModifierRef>,
    pub payload_modifiers: Vec<ModifierRef>,
    pub visibility: Option<AccessRule>,
    pub submit_type: Option<SubmitType>,
    pub properties: BTreeMap<String, serde_json::Value>,
    /// Unrecognised keys, kept for round-tripping.
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Endpoint {
    pub fn new(name: impl Into<String>, kind: EndpointKind, template: QueryTemplate) -> Self {
        Endpoint {
            name: name.into(),
            kind,
            query_template: template,
            output_format: OutputFormat::Json,
            metadata: BTreeMap::new(),
            query_modifiers: Vec::new(),
            result_modifiers: Vec::new(),
            payload_modifiers: Vec::new(),
            visibility: None,
            submit_type: None,
            properties: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub const DEFAULT_TIMEOUT_SECS: u64 = 30;

    /// Execution timeout from the `timeoutSeconds` metadata key.
    pub fn timeout(&self) -> std::time::Duration {
        let secs = self
            .metadata
            .get("timeoutSeconds")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|v| v.is_finite() && *v > 0.0)
            .unwrap_or(Self::DEFAULT_TIMEOUT_SECS as f64);
        std::time::Duration::from_secs_f64(secs)
    }

    /// Submit payload record format from `properties.inputType`.
    pub fn payload_format(&self) -> PayloadFormat {
        self.properties
            .get("inputType")
            .and_then(|v| v.as_str())
            .and_then(|s| s.parse().ok())
            .unwrap_or_default()
    }
}

/// One configured backend plus its endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct DataProviderProfile {
    pub name: String,
    pub provider_id: String,
    pub data_source: ConnectionDescriptor,
    pub query_endpoints: BTreeMap<String, Endpoint>,
    pub submit_endpoints: BTreeMap<String, Endpoint>,
    pub update_endpoints: BTreeMap<String, Endpoint>,
    pub delete_endpoints: BTreeMap<String, Endpoint>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl DataProviderProfile {
    pub fn new(name: impl Into<String>, provider_id: impl Into<String>) -> Self {
        DataProviderProfile {
            name: name.into(),
            provider_id: provider_id.into(),
            data_source: ConnectionDescriptor::default(),
            query_endpoints: BTreeMap::new(),
            submit_endpoints: BTreeMap::new(),
            update_endpoints: BTreeMap::new(),
            delete_endpoints: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn endpoints(&self, kind: EndpointKind) -> &BTreeMap<String, Endpoint> {
        match kind {
            EndpointKind::Query => &self.query_endpoints,
            EndpointKind::Submit => &self.submit_endpoints,
            EndpointKind::Update => &self.update_endpoints,
            EndpointKind::Delete => &self.delete_endpoints,
        }
    }

    pub fn endpoints_mut(&mut self, kind: EndpointKind) -> &mut BTreeMap<String, Endpoint> {
        match kind {
            EndpointKind::Query => &mut self.query_endpoints,
            EndpointKind::Submit => &mut self.submit_endpoints,
            EndpointKind::Update => &mut self.update_endpoints,
            EndpointKind::Delete => &mut self.delete_endpoints,
        }
    }

    /// Adds `endpoint` under its own kind and name, replacing any previous one.
    pub fn with_endpoint(mut self, endpoint: Endpoint) -> Self {
        self.endpoints_mut(endpoint.kind)
            .insert(endpoint.name.clone(), endpoint);
        self
    }

    pub fn endpoint(&self, kind: EndpointKind, name: &str) -> Option<&Endpoint> {
        self.endpoints(kind).get(name)
    }

    pub fn all_endpoints(&self) -> impl Iterator<Item = &Endpoint> {
        EndpointKind::ALL
            .into_iter()
            .flat_map(move |k| self.endpoints(k).values())
    }
}

/// A deployable group of data providers and their endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Project {
    pub name: String,
    pub profiles: BTreeMap<String, DataProviderProfile>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Project {
    pub fn new(name: impl Into<String>) -> Self {
        Project {
            name: name.into(),
            profiles: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with_profile(mut self, profile: DataProviderProfile) -> Self {
        self.profiles.insert(profile.name.clone(), profile);
        self
    }

    /// Every `(method, path)` this project serves, in a stable order.
    pub fn routes(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for profile in self.profiles.values() {
            for ep in profile.all_endpoints() {
                out.push((
                    ep.kind.verb(),
                    format!(
                        "/services/{}/{}/{}/{}",
                        self.name,
                        profile.name,
                        ep.kind.segment(),
                        ep.name
                    ),
                ));
            }
        }
        out.sort();
        out
    }
}

/// `[A-Za-z_][A-Za-z0-9_]*`
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Names that can stand as one URL path segment without escaping.
pub fn is_path_segment(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.len() <= 128
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}
