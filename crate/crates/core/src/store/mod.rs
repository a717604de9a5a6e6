//! Durable state: users, API keys and the audit trail.
//!
//! Storage sits behind the [`CredentialStore`] and [`AuditStore`] traits; the
//! shipped implementation is a single-file SQLite database ([`SqliteStore`]).
//! Audit appends are funnelled through one writer thread ([`Auditor`]) that
//! also feeds the rolling access log.

mod access_log;
mod audit;
mod sqlite;

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use access_log::{format_access_line, RollingLog, ACCESS_LOG_KEEP, ACCESS_LOG_MAX_BYTES};
pub use audit::{AuditEntry, Auditor, AuditorStats};
pub use sqlite::SqliteStore;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("storage full")]
    StorageFull,
    #[error("store locked")]
    Locked,
    #[error("storage failure: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UserRecord {
    pub subject: String,
    pub roles: BTreeSet<String>,
    pub active: bool,
    pub created_at: DateTime<Utc>,
}

impl UserRecord {
    pub fn new(subject: &str, roles: impl IntoIterator<Item = impl Into<String>>) -> Self {
        UserRecord {
            subject: subject.to_string(),
            roles: roles.into_iter().map(Into::into).collect(),
            active: true,
            created_at: Utc::now(),
        }
    }
}

/// Stored form of an API key. The key itself is never persisted; only its
/// SHA-256 digest and a short fingerprint are.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ApiKeyRecord {
    pub fingerprint: String,
    #[serde(skip)]
    pub key_hash: String,
    pub subject: String,
    pub issued_at: DateTime<Utc>,
    pub expires_at: Option<DateTime<Utc>>,
    pub revoked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditRecord {
    pub id: u64,
    pub timestamp: DateTime<Utc>,
    pub subject: String,
    pub method: String,
    pub path: String,
    pub status: u16,
    pub latency_micros: u64,
    pub instance_name: String,
    pub remote: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditFilter {
    pub subject: Option<String>,
    pub path_prefix: Option<String>,
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
    pub status: Option<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Page {
    pub offset: u64,
    pub limit: u64,
}

impl Page {
    pub fn new(offset: u64, limit: u64) -> Self {
        Page { offset, limit }
    }
}

impl Default for Page {
    fn default() -> Self {
        Page {
            offset: 0,
            limit: 100,
        }
    }
}

pub trait CredentialStore: Send + Sync {
    fn put_user(&self, user: &UserRecord) -> Result<(), StoreError>;
    fn get_user(&self, subject: &str) -> Result<UserRecord, StoreError>;
    fn set_active(&self, subject: &str, active: bool) -> Result<UserRecord, StoreError>;
    fn list_users(&self) -> Result<Vec<UserRecord>, StoreError>;

    fn insert_api_key(&self, key: &ApiKeyRecord) -> Result<(), StoreError>;
    fn find_api_key(&self, key_hash: &str) -> Result<Option<ApiKeyRecord>, StoreError>;
    fn list_api_keys(&self, subject: Option<&str>) -> Result<Vec<ApiKeyRecord>, StoreError>;
    fn revoke_api_key(&self, fingerprint: &str) -> Result<ApiKeyRecord, StoreError>;
}

pub trait AuditStore: Send + Sync {
    /// Appends records in one transaction. Ids are assigned by the caller
    /// and must exceed every stored id.
    fn append_audit_batch(&self, records: &[AuditRecord]) -> Result<(), StoreError>;
    /// Matching records, newest first.
    fn query_audit(&self, filter: &AuditFilter, page: Page) -> Result<Vec<AuditRecord>, StoreError>;
    fn count_audit(&self, filter: &AuditFilter) -> Result<u64, StoreError>;
    fn max_audit_id(&self) -> Result<u64, StoreError>;
}
