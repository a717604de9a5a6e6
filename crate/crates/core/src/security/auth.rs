//! Credential checking and API key issuance.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Utc};
use serde::Serialize;

use super::{
    credential_hash, fingerprint, header, AuthCache, AuthError, JwtVerifier, Principal,
    PrincipalSource, AUTH_CACHE_CAPACITY,
};
use crate::clock::Clock;
use crate::model::AuthProtocol;
use crate::store::{ApiKeyRecord, CredentialStore, StoreError, UserRecord};

/// A freshly issued key. The `key` field is the only copy that will ever
/// exist; the store keeps a digest.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct IssuedApiKey {
    pub key: String,
    pub fingerprint: String,
    pub subject: String,
    pub roles: BTreeSet<String>,
    pub issued_at: DateTime<Utc>,
    pub expires_at: Option<DateTime<Utc>>,
}

/// Issues an API key for `subject`, creating the user if needed. When
/// `roles` is given it replaces the user's roles.
pub fn issue_api_key(
    store: &dyn CredentialStore,
    subject: &str,
    roles: Option<BTreeSet<String>>,
    ttl: Option<Duration>,
    now: DateTime<Utc>,
) -> Result<IssuedApiKey, StoreError> {
    if subject.is_empty() {
        return Err(StoreError::Conflict("subject must not be empty".into()));
    }
    let user = match store.get_user(subject) {
        Ok(mut u) => {
            if let Some(r) = roles {
                u.roles = r;
                store.put_user(&u)?;
            }
            u
        }
        Err(StoreError::NotFound(_)) => {
            let mut u = UserRecord::new(subject, roles.unwrap_or_default());
            u.created_at = now;
            store.put_user(&u)?;
            u
        }
        Err(e) => return Err(e),
    };
    let key = URL_SAFE_NO_PAD.encode(rand::random::<[u8; 32]>());
    let expires_at = ttl.map(|t| now + chrono::Duration::from_std(t).unwrap_or(chrono::Duration::MAX));
    let record = ApiKeyRecord {
        fingerprint: fingerprint(&key),
        key_hash: hex::encode(credential_hash(&key)),
        subject: subject.to_string(),
        issued_at: now,
        expires_at,
        revoked: false,
    };
    store.insert_api_key(&record)?;
    Ok(IssuedApiKey {
        key,
        fingerprint: record.fingerprint,
        subject: subject.to_string(),
        roles: user.roles,
        issued_at: now,
        expires_at,
    })
}

pub struct Authenticator {
    enabled: bool,
    protocol: AuthProtocol,
    store: Arc<dyn CredentialStore>,
    verifier: Option<JwtVerifier>,
    cache: AuthCache,
    clock: Arc<dyn Clock>,
}

impl Authenticator {
    pub fn new(
        enabled: bool,
        protocol: AuthProtocol,
        store: Arc<dyn CredentialStore>,
        verifier: Option<JwtVerifier>,
        cache_ttl: Duration,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Authenticator {
            enabled,
            protocol,
            store,
            verifier,
            cache: AuthCache::new(AUTH_CACHE_CAPACITY, cache_ttl),
            clock,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn protocol(&self) -> AuthProtocol {
        self.protocol
    }

    pub fn cache(&self) -> &AuthCache {
        &self.cache
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn store(&self) -> &Arc<dyn CredentialStore> {
        &self.store
    }

    /// The header value that carried the credential, if any.
    pub fn presented_credential<'a>(&self, headers: &'a BTreeMap<String, String>) -> Option<&'a str> {
        let bearer = header(headers, "authorization").and_then(|v| {
            let (scheme, rest) = v.split_once(' ')?;
            scheme.eq_ignore_ascii_case("bearer").then(|| rest.trim())
        });
        match self.protocol {
            AuthProtocol::ApiKey => header(headers, "api_key").map(str::trim).or(bearer),
            AuthProtocol::Jwt => bearer,
        }
        .filter(|c| !c.is_empty())
    }

    /// Authenticates a request from its (lower-cased) headers.
    pub fn authenticate(&self, headers: &BTreeMap<String, String>) -> Result<Principal, AuthError> {
        if !self.enabled {
            return Ok(Principal::anonymous());
        }
        let credential = self
            .presented_credential(headers)
            .ok_or(AuthError::MissingCredential)?;
        let now = self.clock.now();
        let digest = credential_hash(credential);
        if let Some(p) = self.cache.get(&digest, now) {
            return Ok(p);
        }
        let (principal, fp) = match self.protocol {
            AuthProtocol::ApiKey => (self.check_api_key(credential, &digest, now)?, Some(fingerprint(credential))),
            AuthProtocol::Jwt => (self.check_jwt(credential, now)?, None),
        };
        self.cache.put(digest, principal.clone(), fp, now);
        Ok(principal)
    }

    fn check_api_key(
        &self,
        key: &str,
        digest: &[u8; 32],
        now: DateTime<Utc>,
    ) -> Result<Principal, AuthError> {
        let record = self
            .store
            .find_api_key(&hex::encode(digest))
            .map_err(|e| AuthError::StoreUnavailable(e.to_string()))?
            .ok_or_else(|| AuthError::InvalidCredential(format!("unknown key {}", fingerprint(key))))?;
        if record.revoked {
            return Err(AuthError::RevokedCredential);
        }
        if record.expires_at.is_some_and(|exp| now >= exp) {
            return Err(AuthError::ExpiredCredential);
        }
        let user = self.active_user(&record.subject)?.ok_or_else(|| {
            AuthError::InvalidCredential(format!("key {} has no user", record.fingerprint))
        })?;
        Ok(Principal {
            subject: user.subject,
            roles: user.roles,
            source: PrincipalSource::ApiKey,
            expires_at: record.expires_at,
        })
    }

    fn check_jwt(&self, token: &str, now: DateTime<Utc>) -> Result<Principal, AuthError> {
        let verifier = self
            .verifier
            .as_ref()
            .ok_or_else(|| AuthError::InvalidCredential("no token verification key configured".into()))?;
        let claims = verifier.verify(token, now)?;
        // Token subjects need not be local users, but a local user who has
        // been deactivated stays locked out.
        self.active_user(&claims.sub)?;
        let expires_at = claims.expires_at();
        Ok(Principal {
            subject: claims.sub,
            roles: claims.roles,
            source: PrincipalSource::Jwt,
            expires_at,
        })
    }

    fn active_user(&self, subject: &str) -> Result<Option<UserRecord>, AuthError> {
        match self.store.get_user(subject) {
            Ok(u) if !u.active => Err(AuthError::InactiveUser(subject.to_string())),
            Ok(u) => Ok(Some(u)),
            Err(StoreError::NotFound(_)) => Ok(None),
            Err(e) => Err(AuthError::StoreUnavailable(e.to_string())),
        }
    }

    /// Revokes a key and drops any cached decision made from it.
    pub fn revoke_key(&self, fingerprint: &str) -> Result<ApiKeyRecord, StoreError> {
        let rec = self.store.revoke_api_key(fingerprint)?;
        self.cache.invalidate_fingerprint(fingerprint);
        Ok(rec)
    }

    /// Activates or deactivates a user and drops their cached decisions.
    pub fn set_active(&self, subject: &str, active: bool) -> Result<UserRecord, StoreError> {
        let rec = self.store.set_active(subject, active)?;
        self.cache.invalidate_subject(subject);
        Ok(rec)
    }

    /// Replaces a user's roles and drops their cached decisions.
    pub fn put_user(&self, user: &UserRecord) -> Result<(), StoreError> {
        self.store.put_user(user)?;
        self.cache.invalidate_subject(&user.subject);
        Ok(())
    }
}
