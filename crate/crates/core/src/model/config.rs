use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{relaxed, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Http,
    Https,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthProtocol {
    ApiKey,
    Jwt,
}

impl AuthProtocol {
    pub fn as_str(self) -> &'static str {
        match self {
            AuthProtocol::ApiKey => "api_key",
            AuthProtocol::Jwt => "jwt",
        }
    }
}

/// Whether audit appends wait for the store commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditMode {
    /// Flushed by the writer at least every `auditFlushIntervalMillis`.
    Buffered,
    /// Committed before the response is sent.
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum RateLimitScope {
    PerPrincipal,
    PerRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RateLimitPolicy {
    pub requests_per_window: u32,
    pub window_seconds: u32,
    #[serde(default = "default_scope")]
    pub scope: RateLimitScope,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_role_overrides: BTreeMap<String, u32>,
}

fn default_scope() -> RateLimitScope {
    RateLimitScope::PerPrincipal
}

impl RateLimitPolicy {
    pub fn new(requests_per_window: u32, window_seconds: u32) -> Self {
        RateLimitPolicy {
            requests_per_window,
            window_seconds,
            scope: RateLimitScope::PerPrincipal,
            per_role_overrides: BTreeMap::new(),
        }
    }

    pub fn window(&self) -> Duration {
        Duration::from_secs(u64::from(self.window_seconds))
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.requests_per_window == 0 || self.window_seconds == 0 {
            return Err(ModelError::schema(
                "rateLimit.requestsPerWindow and rateLimit.windowSeconds must be positive",
            ));
        }
        if !self.per_role_overrides.is_empty() && self.scope != RateLimitScope::PerRole {
            return Err(ModelError::schema(
                "rateLimit.perRoleOverrides requires scope \"perRole\"",
            ));
        }
        if self.per_role_overrides.values().any(|v| *v == 0) {
            return Err(ModelError::schema("rateLimit overrides must be positive"));
        }
        Ok(())
    }
}

/// RS256 key material and expected claims.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct JwtSettings {
    /// PEM public key used to verify presented tokens.
    pub public_key_path: Option<PathBuf>,
    /// PEM private key used to issue tokens.
    pub private_key_path: Option<PathBuf>,
    pub issuer: Option<String>,
    pub audience: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub host: String,
    pub service_port: u16,
    pub console_port: u16,
    pub protocol: Protocol,
    pub enable_authentication: bool,
    pub enable_authorization: bool,
    pub enable_audit: bool,
    pub authentication_protocol: AuthProtocol,
    pub authentication_provider_class: String,
    pub authorization_provider_class: String,
    pub audit_provider_class: String,
    pub proxy_url: String,
    pub instance_name: String,
    pub auth_cache_ttl_seconds: u64,
    pub rate_limit: Option<RateLimitPolicy>,

    pub jwt: JwtSettings,
    pub store_path: Option<PathBuf>,
    pub log_dir: Option<PathBuf>,
    pub projects_dir: Option<PathBuf>,
    pub console_assets_dir: Option<PathBuf>,
    pub audit_mode: AuditMode,
    pub audit_flush_interval: Duration,
    pub reload_interval: Duration,
    pub shutdown_grace: Duration,
    /// Required for `protocol: https`, since TLS is terminated in front of us.
    pub external_tls_terminator: bool,
}

impl ServerConfig {
    pub const DEFAULT_AUTH_CACHE_TTL: u64 = 300;

    /// A permissive local configuration, mostly useful in tests.
    pub fn local(service_port: u16, console_port: u16) -> Self {
        ServerConfig {
            host: "127.0.0.1".into(),
            service_port,
            console_port,
            protocol: Protocol::Http,
            enable_authentication: false,
            enable_authorization: false,
            enable_audit: true,
            authentication_protocol: AuthProtocol::ApiKey,
            authentication_provider_class: "DBAuthenticationProvider".into(),
            authorization_provider_class: "AuthorizationProviderImpl".into(),
            audit_provider_class: "DBAuditProvider".into(),
            proxy_url: format!("http://localhost:{service_port}"),
            instance_name: "datagate".into(),
            auth_cache_ttl_seconds: Self::DEFAULT_AUTH_CACHE_TTL,
            rate_limit: None,
            jwt: JwtSettings::default(),
            store_path: None,
            log_dir: None,
            projects_dir: None,
            console_assets_dir: None,
            audit_mode: AuditMode::Buffered,
            audit_flush_interval: Duration::from_millis(250),
            reload_interval: Duration::from_secs(1),
            shutdown_grace: Duration::from_secs(10),
            external_tls_terminator: false,
        }
    }

    pub fn auth_cache_ttl(&self) -> Duration {
        Duration::from_secs(self.auth_cache_ttl_seconds)
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawConfig {
    host: Option<String>,
    #[serde(alias = "servicePort")]
    port: Option<u16>,
    console_port: Option<u16>,
    protocol: Option<Protocol>,
    enable_authentication: Option<bool>,
    enable_authorization: Option<bool>,
    enable_audit: Option<bool>,
    authentication_protocol: Option<String>,
    authentication_provider_class: Option<String>,
    authorization_provider_class: Option<String>,
    audit_provider_class: Option<String>,
    proxy_url: Option<String>,
    instance_name: Option<String>,
    auth_cache_ttl_seconds: Option<u64>,
    rate_limit: Option<RateLimitPolicy>,
    jwt_public_key_path: Option<PathBuf>,
    jwt_private_key_path: Option<PathBuf>,
    jwt_issuer: Option<String>,
    jwt_audience: Option<String>,
    store_path: Option<PathBuf>,
    log_dir: Option<PathBuf>,
    projects_dir: Option<PathBuf>,
    console_assets_dir: Option<PathBuf>,
    audit_mode: Option<AuditMode>,
    audit_flush_interval_millis: Option<u64>,
    reload_interval_millis: Option<u64>,
    shutdown_grace_seconds: Option<u64>,
    external_tls_terminator: Option<bool>,
}

/// Parses a server configuration document and applies defaults.
///
/// `host` and `port` are mandatory. The console port defaults to the service
/// port plus one and must differ from it.
pub fn parse_server_config(bytes: &[u8]) -> Result<ServerConfig, ModelError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ModelError::MalformedDocument {
        line: 0,
        column: 0,
        message: format!("configuration is not UTF-8: {e}"),
    })?;
    let raw: RawConfig = relaxed::from_str(text).map_err(ModelError::from_json)?;

    let host = raw
        .host
        .filter(|h| !h.trim().is_empty())
        .ok_or_else(|| ModelError::schema("'host' is mandatory"))?;
    host.parse::<std::net::IpAddr>()
        .map_err(|_| ModelError::schema(format!("'host' must be an IP address, got '{host}'")))?;
    let service_port = raw
        .port
        .ok_or_else(|| ModelError::schema("'port' is mandatory"))?;
    let console_port = match raw.console_port {
        Some(p) => p,
        None if service_port == 0 => 0,
        None => service_port.checked_add(1).ok_or_else(|| {
            ModelError::schema("consolePort defaults to port + 1, which overflows; set it explicitly")
        })?,
    };
    if service_port == console_port && service_port != 0 {
        return Err(ModelError::schema(format!(
            "service port and console port must differ (both {service_port})"
        )));
    }

    let authentication_protocol = match raw.authentication_protocol.as_deref() {
        None => AuthProtocol::ApiKey,
        Some("api_key") => AuthProtocol::ApiKey,
        Some("jwt") => AuthProtocol::Jwt,
        Some(other) => {
            return Err(ModelError::schema(format!(
                "unknown authenticationProtocol '{other}' (expected api_key or jwt)"
            )))
        }
    };
    let enable_authentication = raw.enable_authentication.unwrap_or(true);
    let enable_authorization = raw.enable_authorization.unwrap_or(false);
    if enable_authorization && !enable_authentication {
        return Err(ModelError::schema(
            "enableAuthorization requires enableAuthentication",
        ));
    }
    if let Some(policy) = &raw.rate_limit {
        policy.validate()?;
    }
    let audit_flush_interval = Duration::from_millis(raw.audit_flush_interval_millis.unwrap_or(250));
    if audit_flush_interval.is_zero() || audit_flush_interval > Duration::from_secs(1) {
        return Err(ModelError::schema(
            "auditFlushIntervalMillis must be between 1 and 1000",
        ));
    }
    let reload_interval = Duration::from_millis(raw.reload_interval_millis.unwrap_or(1000));
    if reload_interval.is_zero() {
        return Err(ModelError::schema("reloadIntervalMillis must be positive"));
    }

    let default_class = |v: Option<String>, d: &str| v.unwrap_or_else(|| d.to_string());
    let auth_default = match authentication_protocol {
        AuthProtocol::ApiKey => "DBAuthenticationProvider",
        AuthProtocol::Jwt => "OAuthProvider",
    };
    Ok(ServerConfig {
        proxy_url: raw
            .proxy_url
            .unwrap_or_else(|| format!("http://localhost:{service_port}")),
        host,
        service_port,
        console_port,
        protocol: raw.protocol.unwrap_or(Protocol::Http),
        enable_authentication,
        enable_authorization,
        enable_audit: raw.enable_audit.unwrap_or(true),
        authentication_protocol,
        authentication_provider_class: default_class(
            raw.authentication_provider_class,
            auth_default,
        ),
        authorization_provider_class: default_class(
            raw.authorization_provider_class,
            "AuthorizationProviderImpl",
        ),
        audit_provider_class: default_class(raw.audit_provider_class, "DBAuditProvider"),
        instance_name: raw.instance_name.unwrap_or_else(|| "datagate".into()),
        auth_cache_ttl_seconds: raw
            .auth_cache_ttl_seconds
            .unwrap_or(ServerConfig::DEFAULT_AUTH_CACHE_TTL),
        rate_limit: raw.rate_limit,
        jwt: JwtSettings {
            public_key_path: raw.jwt_public_key_path,
            private_key_path: raw.jwt_private_key_path,
            issuer: raw.jwt_issuer,
            audience: raw.jwt_audience,
        },
        store_path: raw.store_path,
        log_dir: raw.log_dir,
        projects_dir: raw.projects_dir,
        console_assets_dir: raw.console_assets_dir,
        audit_mode: raw.audit_mode.unwrap_or(AuditMode::Buffered),
        audit_flush_interval,
        reload_interval,
        shutdown_grace: Duration::from_secs(raw.shutdown_grace_seconds.unwrap_or(10)),
        external_tls_terminator: raw.external_tls_terminator.unwrap_or(false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LISTING: &str = include_str!("../../tests/fixtures/server_config.json");

    #[test]
    fn listing_parses() {
        let c = parse_server_config(LISTING.as_bytes()).unwrap();
        assert_eq!(c.host, "0.0.0.0");
        assert_eq!(c.service_port, 9099);
        assert_eq!(c.console_port, 9100);
        assert_eq!(c.protocol, Protocol::Http);
        assert!(c.enable_authentication);
        assert!(!c.enable_authorization);
        assert!(c.enable_audit);
        assert_eq!(c.authentication_protocol, AuthProtocol::Jwt);
        assert_eq!(c.authentication_provider_class, "OAuthProvider");
        assert_eq!(c.audit_provider_class, "DBAuditProvider");
        assert_eq!(c.proxy_url, "http://localhost:9099");
        let raw: serde_json::Value = relaxed::from_str(LISTING).unwrap();
        assert_eq!(raw["instanceName"], c.instance_name.as_str());
        assert_eq!(c.auth_cache_ttl_seconds, 300);
        assert_eq!(c.audit_mode, AuditMode::Buffered);
    }

    #[test]
    fn empty_document_lacks_host_and_port() {
        assert!(matches!(
            parse_server_config(b"{}"),
            Err(ModelError::SchemaViolation(_))
        ));
        assert!(matches!(
            parse_server_config(br#"{"host": "0.0.0.0"}"#),
            Err(ModelError::SchemaViolation(_))
        ));
    }

    #[test]
    fn unknown_protocol_rejected() {
        let err = parse_server_config(
            br#"{"host": "0.0.0.0", "port": 1, "authenticationProtocol": "basic"}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("basic"));
    }

    #[test]
    fn ports_must_differ() {
        let err =
            parse_server_config(br#"{"host": "0.0.0.0", "port": 80, "consolePort": 80}"#).unwrap_err();
        assert!(matches!(err, ModelError::SchemaViolation(_)));
    }

    #[test]
    fn authorization_needs_authentication() {
        let err = parse_server_config(
            br#"{"host": "0.0.0.0", "port": 80, "enableAuthentication": false, "enableAuthorization": true}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::SchemaViolation(_)));
    }

    #[test]
    fn rate_limit_policy() {
        let c = parse_server_config(
            br#"{"host": "127.0.0.1", "port": 80,
                 "rateLimit": {"requestsPerWindow": 5, "windowSeconds": 60,
                               "scope": "perRole", "perRoleOverrides": {"admin": 1000}}}"#,
        )
        .unwrap();
        let p = c.rate_limit.unwrap();
        assert_eq!(p.requests_per_window, 5);
        assert_eq!(p.per_role_overrides["admin"], 1000);

        let err = parse_server_config(
            br#"{"host": "127.0.0.1", "port": 80,
                 "rateLimit": {"requestsPerWindow": 5, "windowSeconds": 60,
                               "perRoleOverrides": {"admin": 1000}}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("perRole"));
    }

    #[test]
    fn malformed_config_points_at_line() {
        let err = parse_server_config(b"{\n  \"host\": \"0.0.0.0\"\n  \"port\": 1\n}").unwrap_err();
        assert_eq!(err.line(), Some(3));
    }
}
