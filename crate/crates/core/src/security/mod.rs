//! Authentication (API keys and RS256 JWTs), decision caching,
//! endpoint authorization, credential issuance and rate limiting.

mod auth;
mod cache;
pub mod jwt;
mod rate_limit;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use auth::{issue_api_key, Authenticator, IssuedApiKey};
pub use cache::{AuthCache, AUTH_CACHE_CAPACITY};
pub use jwt::{JwtClaims, JwtIssuer, JwtVerifier, CLOCK_SKEW_SECONDS};
pub use rate_limit::{RateDecision, RateLimiter};

use crate::model::Endpoint;

/// Administrator role: manages the instance, users and credentials.
pub const ROLE_ADMIN: &str = "admin";
/// API developer role: creates and edits projects.
pub const ROLE_DEVELOPER: &str = "api_developer";
/// API user role: invokes data-service endpoints.
pub const ROLE_USER: &str = "api_user";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PrincipalSource {
    ApiKey,
    Jwt,
    Anonymous,
}

/// The authenticated caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub subject: String,
    pub roles: BTreeSet<String>,
    pub source: PrincipalSource,
    pub expires_at: Option<DateTime<Utc>>,
}

impl Principal {
    /// The caller when authentication is disabled.
    pub fn anonymous() -> Self {
        Principal {
            subject: "anonymous".into(),
            roles: BTreeSet::new(),
            source: PrincipalSource::Anonymous,
            expires_at: None,
        }
    }

    pub fn has_role(&self, role: &str) -> bool {
        self.roles.contains(role)
    }

    pub fn is_admin(&self) -> bool {
        self.has_role(ROLE_ADMIN)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AuthError {
    #[error("no credential presented")]
    MissingCredential,
    #[error("invalid credential: {0}")]
    InvalidCredential(String),
    #[error("credential expired")]
    ExpiredCredential,
    #[error("credential revoked")]
    RevokedCredential,
    #[error("user '{0}' is deactivated")]
    InactiveUser(String),
    #[error("credential store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("no signing key configured")]
    NoSigningKey,
}

impl AuthError {
    /// True for failures that are the caller's fault (HTTP 401).
    pub fn is_unauthorized(&self) -> bool {
        !matches!(self, AuthError::StoreUnavailable(_) | AuthError::NoSigningKey)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthzDecision {
    Allow,
    Deny(String),
}

impl AuthzDecision {
    pub fn is_allow(&self) -> bool {
        matches!(self, AuthzDecision::Allow)
    }
}

/// Endpoint-level role check. Entry-level attribute filtering is enforced
/// separately by the role-filter query modifier.
pub fn authorize(principal: &Principal, endpoint: &Endpoint, enabled: bool) -> AuthzDecision {
    if !enabled {
        return AuthzDecision::Allow;
    }
    let Some(rule) = &endpoint.visibility else {
        return AuthzDecision::Allow;
    };
    if rule.allowed_roles.is_empty() || !rule.allowed_roles.is_disjoint(&principal.roles) {
        AuthzDecision::Allow
    } else {
        AuthzDecision::Deny(format!(
            "endpoint '{}' requires one of the roles {:?}",
            endpoint.name, rule.allowed_roles
        ))
    }
}

/// SHA-256 of a presented credential.
pub fn credential_hash(credential: &str) -> [u8; 32] {
    Sha256::digest(credential.as_bytes()).into()
}

/// Short, non-reversible identifier of a credential, safe to log and list.
pub fn fingerprint(credential: &str) -> String {
    hex::encode(&credential_hash(credential)[..8])
}

/// Case-insensitive header lookup over lower-cased keys.
pub(crate) fn header<'a>(headers: &'a BTreeMap<String, String>, name: &str) -> Option<&'a str> {
    headers.get(name).map(String::as_str)
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.subject)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AccessRule, EndpointKind};
    use crate::template::QueryTemplate;

    fn principal(roles: &[&str]) -> Principal {
        Principal {
            subject: "p".into(),
            roles: roles.iter().map(|r| r.to_string()).collect(),
            source: PrincipalSource::ApiKey,
            expires_at: None,
        }
    }

    fn endpoint(roles: &[&str]) -> Endpoint {
        let mut ep = Endpoint::new("e", EndpointKind::Query, QueryTemplate::default());
        ep.visibility = Some(AccessRule {
            allowed_roles: roles.iter().map(|r| r.to_string()).collect(),
            attribute_filter: None,
        });
        ep
    }

    #[test]
    fn disjoint_roles_deny() {
        assert!(!authorize(&principal(&["api_user"]), &endpoint(&["admin"]), true).is_allow());
    }

    #[test]
    fn empty_roles_allow_anyone() {
        assert!(authorize(&principal(&[]), &endpoint(&[]), true).is_allow());
        assert!(authorize(&principal(&["x"]), &endpoint(&[]), true).is_allow());
    }

    #[test]
    fn disabled_authorization_allows() {
        assert!(authorize(&principal(&[]), &endpoint(&["admin"]), false).is_allow());
    }

    #[test]
    fn fingerprint_is_short_and_stable() {
        let f = fingerprint("secret-key");
        assert_eq!(f.len(), 16);
        assert_eq!(f, fingerprint("secret-key"));
        assert_ne!(f, fingerprint("secret-kez"));
    }
}
