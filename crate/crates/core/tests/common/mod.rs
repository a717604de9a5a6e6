#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use chrono::{TimeZone, Utc};
use datagate_core::clock::ManualClock;
use datagate_core::model::{AuditMode, AuthProtocol, RateLimitPolicy};
use datagate_core::modifier::{
    ModifierConfig, ModifierContext, ModifierError, ModifierRegistry, PayloadModifier,
    QueryModifier,
};
use datagate_core::pipeline::{Gateway, GatewaySettings, RequestOutcome, ServiceRequest};
use datagate_core::provider::ProviderRegistry;
use datagate_core::registry::ProjectRegistry;
use datagate_core::security::{Authenticator, JwtIssuer, JwtVerifier, RateLimiter};
use datagate_core::store::{Auditor, SqliteStore};
use datagate_core::template::BoundQuery;

pub const KEY_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/keys");

pub fn key(name: &str) -> Vec<u8> {
    std::fs::read(format!("{KEY_DIR}/{name}")).unwrap()
}

pub fn roles(r: &[&str]) -> BTreeSet<String> {
    r.iter().map(|s| s.to_string()).collect()
}

/// Rejects any query whose text contains the configured `word`.
pub struct Veto;

impl QueryModifier for Veto {
    fn apply(
        &self,
        query: BoundQuery,
        config: &ModifierConfig,
        _ctx: &ModifierContext<'_>,
    ) -> Result<BoundQuery, ModifierError> {
        let word = config.get("word").map(String::as_str).unwrap_or("VETO");
        if query.text.contains(word) {
            Err(ModifierError::rejected("veto", format!("query mentions {word}")))
        } else {
            Ok(query)
        }
    }
}

/// Upper-cases the query text.
pub struct Upper;

impl QueryModifier for Upper {
    fn apply(
        &self,
        mut query: BoundQuery,
        _config: &ModifierConfig,
        _ctx: &ModifierContext<'_>,
    ) -> Result<BoundQuery, ModifierError> {
        query.text = query.text.to_uppercase();
        Ok(query)
    }
}

/// Appends the configured `suffix` to the payload.
pub struct Append;

impl PayloadModifier for Append {
    fn apply(
        &self,
        mut payload: Vec<u8>,
        config: &ModifierConfig,
        _ctx: &ModifierContext<'_>,
    ) -> Result<Vec<u8>, ModifierError> {
        payload.extend_from_slice(config.get("suffix").map(String::as_str).unwrap_or("").as_bytes());
        Ok(payload)
    }
}

pub fn test_modifiers() -> Arc<ModifierRegistry> {
    let m = ModifierRegistry::with_builtins();
    m.register_query("veto", Arc::new(Veto)).unwrap();
    m.register_query("upper-caser", Arc::new(Upper)).unwrap();
    m.register_payload("append", Arc::new(Append)).unwrap();
    Arc::new(m)
}

pub struct Options {
    pub auth: Option<AuthProtocol>,
    pub authorization: bool,
    pub rate_limit: Option<RateLimitPolicy>,
    pub cache_ttl: Duration,
    pub audit: bool,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            auth: None,
            authorization: false,
            rate_limit: None,
            cache_ttl: Duration::from_secs(300),
            audit: true,
        }
    }
}

/// An in-process gateway with a manual clock and an in-memory store.
pub struct Harness {
    pub gateway: Arc<Gateway>,
    pub store: Arc<SqliteStore>,
    pub clock: Arc<ManualClock>,
    pub issuer: JwtIssuer,
}

impl Harness {
    pub fn new(opts: Options) -> Self {
        Self::with_providers(opts, ProviderRegistry::with_builtins())
    }

    pub fn with_providers(opts: Options, providers: ProviderRegistry) -> Self {
        let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap()));
        let store = Arc::new(SqliteStore::open_in_memory().unwrap());
        let verifier = JwtVerifier::from_pem(&key("primary_public.pem"), None, None).unwrap();
        let issuer = JwtIssuer::from_pem(&key("primary_private.pem"), None, None).unwrap();
        let auth = Arc::new(Authenticator::new(
            opts.auth.is_some(),
            opts.auth.unwrap_or(AuthProtocol::ApiKey),
            store.clone(),
            Some(verifier),
            opts.cache_ttl,
            clock.clone(),
        ));
        let auditor = if opts.audit {
            Auditor::start(store.clone(), None, AuditMode::Sync, Duration::from_millis(10), "test").unwrap()
        } else {
            Auditor::disabled()
        };
        let registry = Arc::new(ProjectRegistry::new(
            Arc::new(providers),
            test_modifiers(),
            None,
        ));
        let gateway = Gateway::new(
            GatewaySettings {
                enable_authorization: opts.authorization,
                instance_name: "test".into(),
            },
            registry,
            auth,
            Arc::new(RateLimiter::new(opts.rate_limit)),
            Arc::new(auditor),
        );
        Harness {
            gateway,
            store,
            clock,
            issuer,
        }
    }

    pub async fn deploy(&self, doc: &str) -> u64 {
        self.gateway
            .registry()
            .deploy(doc.as_bytes(), "p")
            .await
            .unwrap()
            .1
    }

    pub async fn get(&self, path: &str) -> RequestOutcome {
        self.gateway.handle(ServiceRequest::new("GET", path)).await
    }

    pub async fn get_with(&self, path: &str, headers: &[(&str, &str)]) -> RequestOutcome {
        let mut req = ServiceRequest::new("GET", path);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        self.gateway.handle(req).await
    }
}

pub fn json(outcome: &RequestOutcome) -> serde_json::Value {
    serde_json::from_slice(&outcome.body).unwrap_or_else(|_| {
        panic!("non-JSON body: {}", String::from_utf8_lossy(&outcome.body))
    })
}

pub fn params(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}
