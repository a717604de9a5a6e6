//! RS256 token issuance and verification.
//!
//! Signature checking is delegated to `jsonwebtoken`; time claims are checked
//! here against the injected clock so tests can control them.

use std::collections::BTreeSet;

use chrono::{DateTime, TimeZone, Utc};
use jsonwebtoken::{Algorithm, DecodingKey, EncodingKey, Header, Validation};
use serde::{Deserialize, Serialize};

use super::AuthError;

/// Tolerated disagreement between our clock and the issuer's.
pub const CLOCK_SKEW_SECONDS: i64 = 60;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Audience {
    One(String),
    Many(Vec<String>),
}

impl Audience {
    fn contains(&self, aud: &str) -> bool {
        match self {
            Audience::One(a) => a == aud,
            Audience::Many(v) => v.iter().any(|a| a == aud),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JwtClaims {
    pub sub: String,
    pub exp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iat: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iss: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aud: Option<Audience>,
    #[serde(default)]
    pub roles: BTreeSet<String>,
}

impl JwtClaims {
    pub fn expires_at(&self) -> Option<DateTime<Utc>> {
        Utc.timestamp_opt(self.exp, 0).single()
    }
}

pub struct JwtVerifier {
    key: DecodingKey,
    issuer: Option<String>,
    audience: Option<String>,
}

impl JwtVerifier {
    pub fn from_pem(
        pem: &[u8],
        issuer: Option<String>,
        audience: Option<String>,
    ) -> Result<Self, AuthError> {
        let key = DecodingKey::from_rsa_pem(pem)
            .map_err(|e| AuthError::InvalidCredential(format!("bad public key: {e}")))?;
        Ok(JwtVerifier {
            key,
            issuer,
            audience,
        })
    }

    pub fn verify(&self, token: &str, now: DateTime<Utc>) -> Result<JwtClaims, AuthError> {
        let mut validation = Validation::new(Algorithm::RS256);
        validation.validate_exp = false;
        validation.validate_nbf = false;
        validation.validate_aud = false;
        validation.required_spec_claims.clear();
        let data = jsonwebtoken::decode::<JwtClaims>(token, &self.key, &validation)
            .map_err(|e| AuthError::InvalidCredential(format!("token rejected: {e}")))?;
        let claims = data.claims;
        let now_s = now.timestamp();
        if now_s >= claims.exp.saturating_add(CLOCK_SKEW_SECONDS) {
            return Err(AuthError::ExpiredCredential);
        }
        if let Some(iat) = claims.iat {
            if iat > now_s.saturating_add(CLOCK_SKEW_SECONDS) {
                return Err(AuthError::InvalidCredential("token issued in the future".into()));
            }
        }
        if let Some(expected) = &self.issuer {
            if claims.iss.as_deref() != Some(expected.as_str()) {
                return Err(AuthError::InvalidCredential("issuer mismatch".into()));
            }
        }
        if let Some(expected) = &self.audience {
            if !claims.aud.as_ref().is_some_and(|a| a.contains(expected)) {
                return Err(AuthError::InvalidCredential("audience mismatch".into()));
            }
        }
        if claims.sub.is_empty() {
            return Err(AuthError::InvalidCredential("empty subject".into()));
        }
        Ok(claims)
    }
}

pub struct JwtIssuer {
    key: EncodingKey,
    issuer: Option<String>,
    audience: Option<String>,
}

impl JwtIssuer {
    pub fn from_pem(
        pem: &[u8],
        issuer: Option<String>,
        audience: Option<String>,
    ) -> Result<Self, AuthError> {
        let key = EncodingKey::from_rsa_pem(pem)
            .map_err(|e| AuthError::InvalidCredential(format!("bad private key: {e}")))?;
        Ok(JwtIssuer {
            key,
            issuer,
            audience,
        })
    }

    /// Signs a token for `subject` valid for `ttl` from `now`.
    pub fn issue(
        &self,
        subject: &str,
        roles: &BTreeSet<String>,
        ttl: std::time::Duration,
        now: DateTime<Utc>,
    ) -> Result<String, AuthError> {
        let claims = JwtClaims {
            sub: subject.to_string(),
            exp: now.timestamp().saturating_add(ttl.as_secs() as i64),
            iat: Some(now.timestamp()),
            iss: self.issuer.clone(),
            aud: self.audience.clone().map(Audience::One),
            roles: roles.clone(),
        };
        self.sign(&claims)
    }

    /// Signs arbitrary claims; used by tests to mint odd tokens.
    pub fn sign(&self, claims: &JwtClaims) -> Result<String, AuthError> {
        jsonwebtoken::encode(&Header::new(Algorithm::RS256), claims, &self.key)
            .map_err(|e| AuthError::InvalidCredential(format!("signing failed: {e}")))
    }
}
