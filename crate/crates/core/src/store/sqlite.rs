//! SQLite implementation of the credential and audit stores.
//!
//! One read-write connection serves all writes; file-backed stores get a
//! second read-only connection so audit queries do not queue behind the
//! audit writer (WAL mode allows both at once).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use rusqlite::types::Value as SqlValue;
use rusqlite::{params, params_from_iter, Connection, ErrorCode, OpenFlags, OptionalExtension, Row};

use super::{
    ApiKeyRecord, AuditFilter, AuditRecord, AuditStore, CredentialStore, Page, StoreError,
    UserRecord,
};

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS users (
    subject    TEXT PRIMARY KEY,
    roles      TEXT NOT NULL,
    active     INTEGER NOT NULL,
    created_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS api_keys (
    fingerprint TEXT PRIMARY KEY,
    key_hash    TEXT NOT NULL UNIQUE,
    subject     TEXT NOT NULL,
    issued_at   INTEGER NOT NULL,
    expires_at  INTEGER,
    revoked     INTEGER NOT NULL DEFAULT 0
);
CREATE INDEX IF NOT EXISTS api_keys_subject ON api_keys(subject);
CREATE TABLE IF NOT EXISTS audit (
    id          INTEGER PRIMARY KEY,
    ts          INTEGER NOT NULL,
    subject     TEXT NOT NULL,
    method      TEXT NOT NULL,
    path        TEXT NOT NULL,
    status      INTEGER NOT NULL,
    latency_us  INTEGER NOT NULL,
    instance    TEXT NOT NULL,
    remote      TEXT NOT NULL,
    bytes       INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS audit_ts ON audit(ts);
CREATE INDEX IF NOT EXISTS audit_subject ON audit(subject, ts);
";

pub struct SqliteStore {
    writer: Mutex<Connection>,
    reader: Option<Mutex<Connection>>,
    path: Option<PathBuf>,
}

impl SqliteStore {
    /// Opens or creates the store file, creating parent directories.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| StoreError::Io(e.to_string()))?;
        }
        let writer = Connection::open(path).map_err(map_err)?;
        writer
            .pragma_update(None, "journal_mode", "WAL")
            .map_err(map_err)?;
        writer
            .pragma_update(None, "synchronous", "NORMAL")
            .map_err(map_err)?;
        writer
            .busy_timeout(Duration::from_secs(5))
            .map_err(map_err)?;
        writer.execute_batch(SCHEMA).map_err(map_err)?;
        let reader = Connection::open_with_flags(
            path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(map_err)?;
        reader
            .busy_timeout(Duration::from_secs(5))
            .map_err(map_err)?;
        Ok(SqliteStore {
            writer: Mutex::new(writer),
            reader: Some(Mutex::new(reader)),
            path: Some(path.to_path_buf()),
        })
    }

    /// A private, non-durable store, for tests and ephemeral instances.
    pub fn open_in_memory() -> Result<Self, StoreError> {
        let conn = Connection::open_in_memory().map_err(map_err)?;
        conn.execute_batch(SCHEMA).map_err(map_err)?;
        Ok(SqliteStore {
            writer: Mutex::new(conn),
            reader: None,
            path: None,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn write<T>(&self, f: impl FnOnce(&mut Connection) -> rusqlite::Result<T>) -> Result<T, StoreError> {
        let mut conn = self.writer.lock().map_err(|_| StoreError::Io("writer poisoned".into()))?;
        f(&mut conn).map_err(map_err)
    }

    fn read<T>(&self, f: impl FnOnce(&Connection) -> rusqlite::Result<T>) -> Result<T, StoreError> {
        let lock = self.reader.as_ref().unwrap_or(&self.writer);
        let conn = lock.lock().map_err(|_| StoreError::Io("reader poisoned".into()))?;
        f(&conn).map_err(map_err)
    }
}

fn map_err(e: rusqlite::Error) -> StoreError {
    match &e {
        rusqlite::Error::SqliteFailure(f, _) => match f.code {
            ErrorCode::DiskFull => StoreError::StorageFull,
            ErrorCode::DatabaseBusy | ErrorCode::DatabaseLocked => StoreError::Locked,
            ErrorCode::ConstraintViolation => StoreError::Conflict(e.to_string()),
            _ => StoreError::Io(e.to_string()),
        },
        _ => StoreError::Io(e.to_string()),
    }
}

fn micros(t: DateTime<Utc>) -> i64 {
    t.timestamp_micros()
}

fn from_micros(us: i64) -> DateTime<Utc> {
    Utc.timestamp_micros(us).single().unwrap_or_default()
}

fn roles_json(roles: &BTreeSet<String>) -> String {
    serde_json::to_string(roles).expect("string set serializes")
}

fn user_from_row(row: &Row<'_>) -> rusqlite::Result<UserRecord> {
    let roles: String = row.get(1)?;
    Ok(UserRecord {
        subject: row.get(0)?,
        roles: serde_json::from_str(&roles).unwrap_or_default(),
        active: row.get(2)?,
        created_at: from_micros(row.get(3)?),
    })
}

fn key_from_row(row: &Row<'_>) -> rusqlite::Result<ApiKeyRecord> {
    Ok(ApiKeyRecord {
        fingerprint: row.get(0)?,
        key_hash: row.get(1)?,
        subject: row.get(2)?,
        issued_at: from_micros(row.get(3)?),
        expires_at: row.get::<_, Option<i64>>(4)?.map(from_micros),
        revoked: row.get(5)?,
    })
}

fn audit_from_row(row: &Row<'_>) -> rusqlite::Result<AuditRecord> {
    Ok(AuditRecord {
        id: row.get::<_, i64>(0)? as u64,
        timestamp: from_micros(row.get(1)?),
        subject: row.get(2)?,
        method: row.get(3)?,
        path: row.get(4)?,
        status: row.get(5)?,
        latency_micros: row.get::<_, i64>(6)? as u64,
        instance_name: row.get(7)?,
        remote: row.get(8)?,
        bytes: row.get::<_, i64>(9)? as u64,
    })
}

const KEY_COLUMNS: &str = "fingerprint, key_hash, subject, issued_at, expires_at, revoked";
const AUDIT_COLUMNS: &str = "id, ts, subject, method, path, status, latency_us, instance, remote, bytes";

impl CredentialStore for SqliteStore {
    fn put_user(&self, user: &UserRecord) -> Result<(), StoreError> {
        self.write(|c| {
            c.execute(
                "INSERT INTO users (subject, roles, active, created_at) VALUES (?1, ?2, ?3, ?4)
                 ON CONFLICT(subject) DO UPDATE SET roles = excluded.roles, active = excluded.active",
                params![user.subject, roles_json(&user.roles), user.active, micros(user.created_at)],
            )
            .map(drop)
        })
    }

    fn get_user(&self, subject: &str) -> Result<UserRecord, StoreError> {
        self.read(|c| {
            c.query_row(
                "SELECT subject, roles, active, created_at FROM users WHERE subject = ?1",
                [subject],
                user_from_row,
            )
            .optional()
        })?
        .ok_or_else(|| StoreError::NotFound(format!("user '{subject}'")))
    }

    fn set_active(&self, subject: &str, active: bool) -> Result<UserRecord, StoreError> {
        let changed = self.write(|c| {
            c.execute(
                "UPDATE users SET active = ?2 WHERE subject = ?1",
                params![subject, active],
            )
        })?;
        if changed == 0 {
            return Err(StoreError::NotFound(format!("user '{subject}'")));
        }
        self.get_user(subject)
    }

    fn list_users(&self) -> Result<Vec<UserRecord>, StoreError> {
        self.read(|c| {
            let mut stmt =
                c.prepare("SELECT subject, roles, active, created_at FROM users ORDER BY subject")?;
            let rows = stmt.query_map([], user_from_row)?;
            rows.collect()
        })
    }

    fn insert_api_key(&self, key: &ApiKeyRecord) -> Result<(), StoreError> {
        self.write(|c| {
            c.execute(
                "INSERT INTO api_keys (fingerprint, key_hash, subject, issued_at, expires_at, revoked)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![
                    key.fingerprint,
                    key.key_hash,
                    key.subject,
                    micros(key.issued_at),
                    key.expires_at.map(micros),
                    key.revoked
                ],
            )
            .map(drop)
        })
    }

    fn find_api_key(&self, key_hash: &str) -> Result<Option<ApiKeyRecord>, StoreError> {
        self.read(|c| {
            c.query_row(
                &format!("SELECT {KEY_COLUMNS} FROM api_keys WHERE key_hash = ?1"),
                [key_hash],
                key_from_row,
            )
            .optional()
        })
    }

    fn list_api_keys(&self, subject: Option<&str>) -> Result<Vec<ApiKeyRecord>, StoreError> {
        self.read(|c| {
            let mut stmt = c.prepare(&format!(
                "SELECT {KEY_COLUMNS} FROM api_keys
                 WHERE ?1 IS NULL OR subject = ?1 ORDER BY issued_at, fingerprint"
            ))?;
            let rows = stmt.query_map([subject], key_from_row)?;
            rows.collect()
        })
    }

    fn revoke_api_key(&self, fingerprint: &str) -> Result<ApiKeyRecord, StoreError> {
        let found = self.write(|c| {
            c.execute("UPDATE api_keys SET revoked = 1 WHERE fingerprint = ?1", [fingerprint])?;
            c.query_row(
                &format!("SELECT {KEY_COLUMNS} FROM api_keys WHERE fingerprint = ?1"),
                [fingerprint],
                key_from_row,
            )
            .optional()
        })?;
        found.ok_or_else(|| StoreError::NotFound(format!("key '{fingerprint}'")))
    }
}

fn audit_where(filter: &AuditFilter) -> (String, Vec<SqlValue>) {
    let mut clauses = Vec::new();
    let mut args = Vec::new();
    if let Some(s) = &filter.subject {
        args.push(SqlValue::Text(s.clone()));
        clauses.push(format!("subject = ?{}", args.len()));
    }
    if let Some(p) = &filter.path_prefix {
        args.push(SqlValue::Text(p.clone()));
        clauses.push(format!("substr(path, 1, length(?{0})) = ?{0}", args.len()));
    }
    if let Some(from) = filter.from {
        args.push(SqlValue::Integer(micros(from)));
        clauses.push(format!("ts >= ?{}", args.len()));
    }
    if let Some(to) = filter.to {
        args.push(SqlValue::Integer(micros(to)));
        clauses.push(format!("ts < ?{}", args.len()));
    }
    if let Some(status) = filter.status {
        args.push(SqlValue::Integer(status.into()));
        clauses.push(format!("status = ?{}", args.len()));
    }
    let sql = if clauses.is_empty() {
        String::new()
    } else {
        format!(" WHERE {}", clauses.join(" AND "))
    };
    (sql, args)
}

impl AuditStore for SqliteStore {
    fn append_audit_batch(&self, records: &[AuditRecord]) -> Result<(), StoreError> {
        if records.is_empty() {
            return Ok(());
        }
        self.write(|c| {
            let tx = c.transaction()?;
            {
                let mut stmt = tx.prepare_cached(&format!(
                    "INSERT INTO audit ({AUDIT_COLUMNS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)"
                ))?;
                for r in records {
                    stmt.execute(params![
                        r.id as i64,
                        micros(r.timestamp),
                        r.subject,
                        r.method,
                        r.path,
                        r.status,
                        r.latency_micros as i64,
                        r.instance_name,
                        r.remote,
                        r.bytes as i64
                    ])?;
                }
            }
            tx.commit()
        })
    }

    fn query_audit(&self, filter: &AuditFilter, page: Page) -> Result<Vec<AuditRecord>, StoreError> {
        let (clause, mut args) = audit_where(filter);
        args.push(SqlValue::Integer(page.limit.min(i64::MAX as u64) as i64));
        args.push(SqlValue::Integer(page.offset.min(i64::MAX as u64) as i64));
        let n = args.len();
        let sql = format!(
            "SELECT {AUDIT_COLUMNS} FROM audit{clause} ORDER BY ts DESC, id DESC LIMIT ?{} OFFSET ?{}",
            n - 1,
            n
        );
        self.read(|c| {
            let mut stmt = c.prepare(&sql)?;
            let rows = stmt.query_map(params_from_iter(args), audit_from_row)?;
            rows.collect()
        })
    }

    fn count_audit(&self, filter: &AuditFilter) -> Result<u64, StoreError> {
        let (clause, args) = audit_where(filter);
        self.read(|c| {
            c.query_row(
                &format!("SELECT COUNT(*) FROM audit{clause}"),
                params_from_iter(args),
                |r| r.get::<_, i64>(0),
            )
        })
        .map(|n| n as u64)
    }

    fn max_audit_id(&self) -> Result<u64, StoreError> {
        self.read(|c| {
            c.query_row("SELECT COALESCE(MAX(id), 0) FROM audit", [], |r| r.get::<_, i64>(0))
        })
        .map(|n| n as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn user_round_trip_and_not_found() {
        let s = SqliteStore::open_in_memory().unwrap();
        let alice = UserRecord::new("alice", ["api_user"]);
        s.put_user(&alice).unwrap();
        let got = s.get_user("alice").unwrap();
        assert_eq!(got.subject, "alice");
        assert_eq!(got.roles, alice.roles);
        assert!(got.active);
        assert!(matches!(s.get_user("bob"), Err(StoreError::NotFound(_))));
        assert!(matches!(s.set_active("bob", false), Err(StoreError::NotFound(_))));
        assert!(!s.set_active("alice", false).unwrap().active);
    }

    #[test]
    fn keys_revoke_and_lookup() {
        let s = SqliteStore::open_in_memory().unwrap();
        let k = ApiKeyRecord {
            fingerprint: "f".into(),
            key_hash: "h".into(),
            subject: "alice".into(),
            issued_at: Utc::now(),
            expires_at: None,
            revoked: false,
        };
        s.insert_api_key(&k).unwrap();
        assert!(matches!(s.insert_api_key(&k), Err(StoreError::Conflict(_))));
        assert!(!s.find_api_key("h").unwrap().unwrap().revoked);
        assert!(s.revoke_api_key("f").unwrap().revoked);
        assert!(s.find_api_key("h").unwrap().unwrap().revoked);
        assert!(matches!(s.revoke_api_key("zz"), Err(StoreError::NotFound(_))));
        assert_eq!(s.list_api_keys(Some("alice")).unwrap().len(), 1);
        assert!(s.list_api_keys(Some("bob")).unwrap().is_empty());
    }

    #[test]
    fn file_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/store.db");
        {
            let s = SqliteStore::open(&path).unwrap();
            s.put_user(&UserRecord::new("alice", ["admin"])).unwrap();
        }
        let s = SqliteStore::open(&path).unwrap();
        assert!(s.get_user("alice").unwrap().roles.contains("admin"));
    }
}
