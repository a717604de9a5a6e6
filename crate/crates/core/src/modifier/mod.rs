//! Query, result and submit-payload modifier chains.
//!
//! Modifier instances are stateless: each call receives the endpoint's
//! configuration for it and a per-request [`ModifierContext`]. A chain is a
//! left fold, and any modifier error aborts the request.

mod builtin;
mod chainer;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, RwLock};

use async_trait::async_trait;
use serde::Serialize;
use thiserror::Error;

pub use builtin::{
    role_filter_from_attribute_filter, CsvFormatter, FieldRedaction, Identity, JsonFieldScrub,
    RoleFilter, CSV_FORMATTER, FIELD_REDACTION, IDENTITY, JSON_FIELD_SCRUB, ROLE_FILTER,
};
pub use chainer::{OutputChainer, DEFAULT_MAX_CHAIN_DEPTH, OUTPUT_CHAINER};

use crate::model::{Endpoint, EndpointKind, ModifierRef};
use crate::provider::ProviderResult;
use crate::security::Principal;
use crate::template::BoundQuery;

pub type ModifierConfig = BTreeMap<String, String>;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ModifierError {
    /// The modifier vetoed the request (HTTP 403).
    #[error("rejected by modifier '{id}': {reason}")]
    Rejected { id: String, reason: String },
    /// The modifier could not do its job (HTTP 500).
    #[error("modifier '{id}' failed: {reason}")]
    Failure { id: String, reason: String },
    /// The request input cannot be processed by the modifier (HTTP 400).
    #[error("modifier '{id}' cannot process the input: {reason}")]
    BadInput { id: String, reason: String },
    #[error("output chain exceeded maximum depth {max} at depth {depth}")]
    ChainDepthExceeded { depth: u32, max: u32 },
    #[error("chain target not found: {0}")]
    TargetNotFound(String),
    /// A chained invocation failed with this HTTP status.
    #[error("chained call failed with status {status}: {message}")]
    Inner { status: u16, message: String },
}

impl ModifierError {
    pub fn rejected(id: &str, reason: impl Into<String>) -> Self {
        ModifierError::Rejected {
            id: id.to_string(),
            reason: reason.into(),
        }
    }

    pub fn failure(id: &str, reason: impl Into<String>) -> Self {
        ModifierError::Failure {
            id: id.to_string(),
            reason: reason.into(),
        }
    }
}

/// Pipeline stages as recorded in a request's trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Authenticate,
    Authorize,
    RateLimit,
    PayloadModifier,
    QueryModifier,
    ProviderExecute,
    ResultModifier,
    Format,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Authenticate => "authenticate",
            Stage::Authorize => "authorize",
            Stage::RateLimit => "rate-limit",
            Stage::PayloadModifier => "payload-modifier",
            Stage::QueryModifier => "query-modifier",
            Stage::ProviderExecute => "provider-execute",
            Stage::ResultModifier => "result-modifier",
            Stage::Format => "format",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageEntry {
    pub stage: Stage,
    /// Modifier id for modifier stages, empty otherwise.
    pub id: String,
}

/// Where an output chain sends each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainTarget {
    pub project: String,
    pub profile: String,
    pub kind: EndpointKind,
    pub endpoint: String,
}

impl fmt::Display for ChainTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.project,
            self.profile,
            self.kind.segment(),
            self.endpoint
        )
    }
}

/// Runs an endpoint through the gateway on behalf of a modifier.
#[async_trait]
pub trait EndpointInvoker: Send + Sync {
    async fn invoke(
        &self,
        target: &ChainTarget,
        params: BTreeMap<String, String>,
        principal: &Principal,
        headers: &BTreeMap<String, String>,
        depth: u32,
    ) -> Result<ProviderResult, ModifierError>;
}

/// Per-request state visible to modifiers.
pub struct ModifierContext<'a> {
    pub principal: &'a Principal,
    pub endpoint: &'a Endpoint,
    pub project: &'a str,
    pub profile: &'a str,
    pub headers: &'a BTreeMap<String, String>,
    /// Nesting level of output chaining; 0 for a request from a client.
    pub depth: u32,
    pub invoker: Option<Arc<dyn EndpointInvoker>>,
    pub trace: Vec<StageEntry>,
}

impl<'a> ModifierContext<'a> {
    pub fn new(
        principal: &'a Principal,
        endpoint: &'a Endpoint,
        headers: &'a BTreeMap<String, String>,
    ) -> Self {
        ModifierContext {
            principal,
            endpoint,
            project: "",
            profile: "",
            headers,
            depth: 0,
            invoker: None,
            trace: Vec::new(),
        }
    }

    pub fn record(&mut self, stage: Stage, id: &str) {
        self.trace.push(StageEntry {
            stage,
            id: id.to_string(),
        });
    }
}

pub trait QueryModifier: Send + Sync {
    /// Checks a configuration once, when a project is installed.
    fn validate(&self, _config: &ModifierConfig) -> Result<(), String> {
        Ok(())
    }

    fn apply(
        &self,
        query: BoundQuery,
        config: &ModifierConfig,
        ctx: &ModifierContext<'_>,
    ) -> Result<BoundQuery, ModifierError>;
}

#[async_trait]
pub trait ResultModifier: Send + Sync {
    fn validate(&self, _config: &ModifierConfig) -> Result<(), String> {
        Ok(())
    }

    async fn apply(
        &self,
        result: ProviderResult,
        config: &ModifierConfig,
        ctx: &ModifierContext<'_>,
    ) -> Result<ProviderResult, ModifierError>;
}

pub trait PayloadModifier: Send + Sync {
    fn validate(&self, _config: &ModifierConfig) -> Result<(), String> {
        Ok(())
    }

    fn apply(
        &self,
        payload: Vec<u8>,
        config: &ModifierConfig,
        ctx: &ModifierContext<'_>,
    ) -> Result<Vec<u8>, ModifierError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModifierStage {
    Query,
    Result,
    Payload,
}

impl fmt::Display for ModifierStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModifierStage::Query => "query",
            ModifierStage::Result => "result",
            ModifierStage::Payload => "payload",
        })
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("{stage} modifier '{id}' is already registered")]
    Duplicate { stage: ModifierStage, id: String },
    #[error("unknown {stage} modifier '{id}'")]
    Unknown { stage: ModifierStage, id: String },
    #[error("bad configuration for {stage} modifier '{id}': {reason}")]
    BadConfig {
        stage: ModifierStage,
        id: String,
        reason: String,
    },
}

#[derive(Default)]
pub struct ModifierRegistry {
    query: RwLock<HashMap<String, Arc<dyn QueryModifier>>>,
    result: RwLock<HashMap<String, Arc<dyn ResultModifier>>>,
    payload: RwLock<HashMap<String, Arc<dyn PayloadModifier>>>,
}

fn insert<T: ?Sized>(
    map: &RwLock<HashMap<String, Arc<T>>>,
    stage: ModifierStage,
    id: &str,
    m: Arc<T>,
) -> Result<(), RegistryError> {
    let mut map = map.write().expect("modifier registry poisoned");
    if map.contains_key(id) {
        return Err(RegistryError::Duplicate {
            stage,
            id: id.to_string(),
        });
    }
    map.insert(id.to_string(), m);
    Ok(())
}

fn lookup<T: ?Sized>(map: &RwLock<HashMap<String, Arc<T>>>, id: &str) -> Option<Arc<T>> {
    map.read().expect("modifier registry poisoned").get(id).cloned()
}

impl ModifierRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding every built-in modifier.
    pub fn with_builtins() -> Self {
        let r = Self::new();
        let id = Arc::new(Identity);
        r.register_query(IDENTITY, id.clone()).expect("fresh registry");
        r.register_result(IDENTITY, id.clone()).expect("fresh registry");
        r.register_payload(IDENTITY, id).expect("fresh registry");
        r.register_query(ROLE_FILTER, Arc::new(RoleFilter))
            .expect("fresh registry");
        r.register_result(FIELD_REDACTION, Arc::new(FieldRedaction))
            .expect("fresh registry");
        r.register_result(CSV_FORMATTER, Arc::new(CsvFormatter))
            .expect("fresh registry");
        r.register_result(OUTPUT_CHAINER, Arc::new(OutputChainer))
            .expect("fresh registry");
        r.register_payload(JSON_FIELD_SCRUB, Arc::new(JsonFieldScrub))
            .expect("fresh registry");
        r
    }

    pub fn register_query(&self, id: &str, m: Arc<dyn QueryModifier>) -> Result<(), RegistryError> {
        insert(&self.query, ModifierStage::Query, id, m)
    }

    pub fn register_result(&self, id: &str, m: Arc<dyn ResultModifier>) -> Result<(), RegistryError> {
        insert(&self.result, ModifierStage::Result, id, m)
    }

    pub fn register_payload(
        &self,
        id: &str,
        m: Arc<dyn PayloadModifier>,
    ) -> Result<(), RegistryError> {
        insert(&self.payload, ModifierStage::Payload, id, m)
    }

    pub fn ids(&self, stage: ModifierStage) -> Vec<String> {
        let mut ids: Vec<String> = match stage {
            ModifierStage::Query => self.query.read().expect("poisoned").keys().cloned().collect(),
            ModifierStage::Result => self.result.read().expect("poisoned").keys().cloned().collect(),
            ModifierStage::Payload => self.payload.read().expect("poisoned").keys().cloned().collect(),
        };
        ids.sort();
        ids
    }

    /// Checks that every reference resolves and its configuration is valid.
    pub fn validate_chain(
        &self,
        stage: ModifierStage,
        chain: &[ModifierRef],
    ) -> Result<(), RegistryError> {
        for r in chain {
            let checked = match stage {
                ModifierStage::Query => lookup(&self.query, &r.id).map(|m| m.validate(&r.config)),
                ModifierStage::Result => lookup(&self.result, &r.id).map(|m| m.validate(&r.config)),
                ModifierStage::Payload => lookup(&self.payload, &r.id).map(|m| m.validate(&r.config)),
            };
            match checked {
                None => {
                    return Err(RegistryError::Unknown {
                        stage,
                        id: r.id.clone(),
                    })
                }
                Some(Err(reason)) => {
                    return Err(RegistryError::BadConfig {
                        stage,
                        id: r.id.clone(),
                        reason,
                    })
                }
                Some(Ok(())) => {}
            }
        }
        Ok(())
    }

    pub fn apply_query_chain(
        &self,
        chain: &[ModifierRef],
        mut query: BoundQuery,
        ctx: &mut ModifierContext<'_>,
    ) -> Result<BoundQuery, ModifierError> {
        for r in chain {
            let m = lookup(&self.query, &r.id)
                .ok_or_else(|| ModifierError::failure(&r.id, "not registered"))?;
            query = m.apply(query, &r.config, ctx)?;
            ctx.record(Stage::QueryModifier, &r.id);
        }
        Ok(query)
    }

    pub async fn apply_result_chain(
        &self,
        chain: &[ModifierRef],
        mut result: ProviderResult,
        ctx: &mut ModifierContext<'_>,
    ) -> Result<ProviderResult, ModifierError> {
        for r in chain {
            let m = lookup(&self.result, &r.id)
                .ok_or_else(|| ModifierError::failure(&r.id, "not registered"))?;
            result = m.apply(result, &r.config, ctx).await?;
            ctx.record(Stage::ResultModifier, &r.id);
        }
        Ok(result)
    }

    pub fn apply_payload_chain(
        &self,
        chain: &[ModifierRef],
        mut payload: Vec<u8>,
        ctx: &mut ModifierContext<'_>,
    ) -> Result<Vec<u8>, ModifierError> {
        for r in chain {
            let m = lookup(&self.payload, &r.id)
                .ok_or_else(|| ModifierError::failure(&r.id, "not registered"))?;
            payload = m.apply(payload, &r.config, ctx)?;
            ctx.record(Stage::PayloadModifier, &r.id);
        }
        Ok(payload)
    }
}

/// Splits a comma-separated config value into trimmed, non-empty items.
pub(crate) fn config_list(config: &ModifierConfig, key: &str) -> Vec<String> {
    config
        .get(key)
        .map(|v| {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        })
        .unwrap_or_default()
}
