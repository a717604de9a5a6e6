//! SQLite-backed SQL provider (file or in-memory).
//!
//! Descriptor keys: `path` (required; `:memory:` for a private in-memory
//! database), `initScript` (SQL batch run on first connect when `initialize`
//! is true), `poolSize` (read connections for file databases, default 4),
//! `busyTimeoutMillis`.
//!
//! Query endpoints run on a pool of read-only connections; mutating endpoints
//! are serialized on a single writer connection. Submit payload records bind
//! to named statement parameters (`:field`), one execution per record inside
//! one transaction.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use rusqlite::types::{Value as SqlValue, ValueRef};
use rusqlite::{Connection, InterruptHandle, OpenFlags};
use serde_json::Value;

use super::generic_sql::{GenericSqlProvider, SqlBackend};
use super::payload::parse_records;
use super::{check_keys, ExecuteRequest, ProviderConnection, ProviderError, ProviderResult, Row};
use crate::model::{ConnectionDescriptor, EndpointKind};

pub const EMBEDDED_SQL_PROVIDER_ID: &str = "EmbeddedSQLProvider";

const KEYS: &[&str] = &["path", "initScript", "poolSize", "busyTimeoutMillis"];

/// The embedded SQL backend. Connections are shared per descriptor, so
/// reconnecting with an identical descriptor returns the same pool.
#[derive(Default)]
pub struct EmbeddedSql {
    pools: Mutex<HashMap<String, Weak<Pool>>>,
}

impl EmbeddedSql {
    pub fn provider() -> GenericSqlProvider<EmbeddedSql> {
        GenericSqlProvider::new(EMBEDDED_SQL_PROVIDER_ID, EmbeddedSql::default())
    }

    fn pool_key(descriptor: &ConnectionDescriptor) -> String {
        let mut key = String::new();
        for (k, v) in &descriptor.properties {
            key.push_str(k);
            key.push('\u{1f}');
            key.push_str(v);
            key.push('\u{1e}');
        }
        key.push_str(if descriptor.initialize { "init" } else { "noinit" });
        key
    }
}

#[async_trait]
impl SqlBackend for EmbeddedSql {
    fn validate(&self, descriptor: &ConnectionDescriptor) -> Result<(), ProviderError> {
        check_keys(descriptor, KEYS)?;
        match descriptor.get("path") {
            Some(p) if !p.trim().is_empty() => {}
            _ => return Err(ProviderError::InvalidDescriptor("'path' is required".into())),
        }
        for key in ["poolSize", "busyTimeoutMillis"] {
            if let Some(v) = descriptor.get(key) {
                v.parse::<u32>().map_err(|_| {
                    ProviderError::InvalidDescriptor(format!("'{key}' must be a non-negative integer"))
                })?;
            }
        }
        Ok(())
    }

    async fn connect(
        &self,
        descriptor: &ConnectionDescriptor,
    ) -> Result<Arc<dyn ProviderConnection>, ProviderError> {
        let key = Self::pool_key(descriptor);
        if let Some(pool) = self
            .pools
            .lock()
            .expect("pool map poisoned")
            .get(&key)
            .and_then(Weak::upgrade)
        {
            return Ok(Arc::new(EmbeddedSqlConnection { pool }));
        }
        let descriptor = descriptor.clone();
        let pool = tokio::task::spawn_blocking(move || Pool::open(&descriptor))
            .await
            .map_err(|e| ProviderError::ConnectionRefused(e.to_string()))??;
        let pool = Arc::new(pool);
        let mut pools = self.pools.lock().expect("pool map poisoned");
        // Another task may have won the race; prefer its pool.
        if let Some(existing) = pools.get(&key).and_then(Weak::upgrade) {
            return Ok(Arc::new(EmbeddedSqlConnection { pool: existing }));
        }
        pools.retain(|_, w| w.strong_count() > 0);
        pools.insert(key, Arc::downgrade(&pool));
        Ok(Arc::new(EmbeddedSqlConnection { pool }))
    }
}

struct Slot {
    conn: Mutex<Connection>,
    interrupt: InterruptHandle,
}

impl Slot {
    fn new(conn: Connection) -> Self {
        let interrupt = conn.get_interrupt_handle();
        Slot {
            conn: Mutex::new(conn),
            interrupt,
        }
    }
}

struct Pool {
    writer: Slot,
    readers: Vec<Slot>,
    next_reader: AtomicUsize,
}

fn open_error(path: &str, e: rusqlite::Error) -> ProviderError {
    ProviderError::ConnectionRefused(format!("cannot open database '{path}': {e}"))
}

impl Pool {
    fn open(descriptor: &ConnectionDescriptor) -> Result<Pool, ProviderError> {
        let path = descriptor.get("path").unwrap_or_default().to_string();
        let busy = Duration::from_millis(
            descriptor
                .get("busyTimeoutMillis")
                .and_then(|v| v.parse().ok())
                .unwrap_or(5_000),
        );
        let in_memory = path == ":memory:";
        if !in_memory && !descriptor.initialize && !Path::new(&path).exists() {
            return Err(ProviderError::ConnectionRefused(format!(
                "database file '{path}' does not exist (set initialize to create it)"
            )));
        }
        let writer = Connection::open(&path).map_err(|e| open_error(&path, e))?;
        writer.busy_timeout(busy).map_err(|e| open_error(&path, e))?;
        if !in_memory {
            writer
                .pragma_update(None, "journal_mode", "WAL")
                .map_err(|e| open_error(&path, e))?;
        }
        if descriptor.initialize {
            if let Some(script) = descriptor.get("initScript") {
                writer
                    .execute_batch(script)
                    .map_err(|e| ProviderError::QueryError(format!("initScript failed: {e}")))?;
            }
        }
        let mut readers = Vec::new();
        if !in_memory {
            let size = descriptor
                .get("poolSize")
                .and_then(|v| v.parse::<usize>().ok())
                .unwrap_or(4)
                .max(1);
            for _ in 0..size {
                let conn = Connection::open_with_flags(
                    &path,
                    OpenFlags::SQLITE_OPEN_READ_ONLY
                        | OpenFlags::SQLITE_OPEN_NO_MUTEX
                        | OpenFlags::SQLITE_OPEN_URI,
                )
                .map_err(|e| open_error(&path, e))?;
                conn.busy_timeout(busy).map_err(|e| open_error(&path, e))?;
                readers.push(Slot::new(conn));
            }
        }
        Ok(Pool {
            writer: Slot::new(writer),
            readers,
            next_reader: AtomicUsize::new(0),
        })
    }

    fn slot_for(&self, kind: EndpointKind) -> &Slot {
        if kind.is_mutating() || self.readers.is_empty() {
            return &self.writer;
        }
        let start = self.next_reader.fetch_add(1, Ordering::Relaxed);
        let n = self.readers.len();
        // Prefer an idle reader; fall back to round-robin.
        for i in 0..n {
            let slot = &self.readers[(start + i) % n];
            if slot.conn.try_lock().is_ok() {
                return slot;
            }
        }
        &self.readers[start % n]
    }
}

/// Interrupts the running statement if the executing future is dropped
/// (e.g. by a gateway timeout) before the blocking work finished.
struct InterruptOnDrop {
    pool: Arc<Pool>,
    slot: Arc<AtomicUsize>,
    done: Arc<AtomicBool>,
}

const WRITER_SLOT: usize = usize::MAX;
const NO_SLOT: usize = usize::MAX - 1;

impl Drop for InterruptOnDrop {
    fn drop(&mut self) {
        if self.done.load(Ordering::Acquire) {
            return;
        }
        match self.slot.load(Ordering::Acquire) {
            NO_SLOT => {}
            WRITER_SLOT => self.pool.writer.interrupt.interrupt(),
            i => self.pool.readers[i].interrupt.interrupt(),
        }
    }
}

pub struct EmbeddedSqlConnection {
    pool: Arc<Pool>,
}

#[async_trait]
impl ProviderConnection for EmbeddedSqlConnection {
    async fn execute(&self, request: ExecuteRequest) -> Result<ProviderResult, ProviderError> {
        let pool = Arc::clone(&self.pool);
        let slot_id = Arc::new(AtomicUsize::new(NO_SLOT));
        let done = Arc::new(AtomicBool::new(false));
        let guard = InterruptOnDrop {
            pool: Arc::clone(&pool),
            slot: Arc::clone(&slot_id),
            done: Arc::clone(&done),
        };
        let result = tokio::task::spawn_blocking(move || {
            let slot = pool.slot_for(request.kind);
            let index = if std::ptr::eq(slot, &pool.writer) {
                WRITER_SLOT
            } else {
                pool.readers
                    .iter()
                    .position(|s| std::ptr::eq(s, slot))
                    .unwrap_or(NO_SLOT)
            };
            slot_id.store(index, Ordering::Release);
            let mut conn = slot.conn.lock().unwrap_or_else(|p| p.into_inner());
            let out = run(&mut conn, &request);
            done.store(true, Ordering::Release);
            out
        })
        .await
        .map_err(|e| ProviderError::ConnectionLost(e.to_string()))?;
        drop(guard);
        result
    }
}

fn query_error(e: rusqlite::Error) -> ProviderError {
    match e {
        rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::OperationInterrupted => {
            ProviderError::Timeout
        }
        other => ProviderError::QueryError(other.to_string()),
    }
}

fn run(conn: &mut Connection, request: &ExecuteRequest) -> Result<ProviderResult, ProviderError> {
    let sql = request.query.text.as_str();
    if request.kind == EndpointKind::Query {
        let mut stmt = conn.prepare(sql).map_err(query_error)?;
        let names: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        let mut cursor = stmt.query([]).map_err(query_error)?;
        while let Some(r) = cursor.next().map_err(query_error)? {
            let mut row = Row::with_capacity(names.len());
            for (i, name) in names.iter().enumerate() {
                let v = r.get_ref(i).map_err(query_error)?;
                row.insert(name.clone(), to_json(v));
            }
            rows.push(row);
        }
        return Ok(ProviderResult::rows(rows));
    }

    let records = match &request.payload {
        Some(bytes) if !bytes.iter().all(u8::is_ascii_whitespace) => {
            Some(parse_records(bytes, request.payload_format).map_err(ProviderError::InvalidPayload)?)
        }
        _ => None,
    };
    let tx = conn.transaction().map_err(query_error)?;
    let mut affected = 0u64;
    {
        let mut stmt = tx.prepare(sql).map_err(query_error)?;
        match records {
            None => {
                affected += stmt.execute([]).map_err(query_error)? as u64;
            }
            Some(records) => {
                for (n, record) in records.iter().enumerate() {
                    for idx in 1..=stmt.parameter_count() {
                        let Some(name) = stmt.parameter_name(idx) else {
                            return Err(ProviderError::InvalidPayload(
                                "statement uses positional parameters; use :name".into(),
                            ));
                        };
                        let field = &name[1..];
                        let value = record.get(field).ok_or_else(|| {
                            ProviderError::InvalidPayload(format!("record {n} lacks field '{field}'"))
                        })?;
                        stmt.raw_bind_parameter(idx, to_sql(value)).map_err(query_error)?;
                    }
                    affected += stmt.raw_execute().map_err(query_error)? as u64;
                }
            }
        }
    }
    tx.commit().map_err(query_error)?;
    Ok(ProviderResult::affected(affected))
}

fn to_json(v: ValueRef<'_>) -> Value {
    match v {
        ValueRef::Null => Value::Null,
        ValueRef::Integer(i) => Value::from(i),
        ValueRef::Real(f) => serde_json::Number::from_f64(f).map_or(Value::Null, Value::Number),
        ValueRef::Text(t) => Value::String(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Value::String(base64::engine::general_purpose::STANDARD.encode(b)),
    }
}

fn to_sql(v: &Value) -> SqlValue {
    match v {
        Value::Null => SqlValue::Null,
        Value::Bool(b) => SqlValue::Integer(i64::from(*b)),
        Value::Number(n) => match n.as_i64() {
            Some(i) => SqlValue::Integer(i),
            None => SqlValue::Real(n.as_f64().unwrap_or(f64::NAN)),
        },
        Value::String(s) => SqlValue::Text(s.clone()),
        other => SqlValue::Text(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PayloadFormat;
    use crate::provider::DataSourceProvider;
    use crate::template::BoundQuery;
    use serde_json::json;

    fn memory() -> ConnectionDescriptor {
        let mut ds = ConnectionDescriptor::default();
        ds.properties.insert("path".into(), ":memory:".into());
        ds.initialize = true;
        ds
    }

    fn req(kind: EndpointKind, sql: &str) -> ExecuteRequest {
        ExecuteRequest::new(kind, BoundQuery::literal(sql, "sql"))
    }

    #[tokio::test]
    async fn fresh_memory_store_is_empty() {
        let conn = EmbeddedSql::provider().connect(&memory()).await.unwrap();
        let r = conn
            .execute(req(EndpointKind::Query, "SELECT count(*) AS n FROM sqlite_master"))
            .await
            .unwrap();
        assert_eq!(r.rows[0]["n"], json!(0));
    }

    #[tokio::test]
    async fn count_and_delete() {
        let conn = EmbeddedSql::provider().connect(&memory()).await.unwrap();
        conn.execute(req(EndpointKind::Update, "CREATE TABLE t(a int)"))
            .await
            .unwrap();
        let ins = conn
            .execute(req(EndpointKind::Submit, "INSERT INTO t VALUES (1),(2),(3)"))
            .await
            .unwrap();
        assert_eq!(ins.affected_count, Some(3));
        let r = conn
            .execute(req(EndpointKind::Query, "SELECT COUNT(*) AS c FROM t"))
            .await
            .unwrap();
        assert_eq!(r.rows, vec![Row::from_iter([("c".to_string(), json!(3))])]);
        let d = conn
            .execute(req(EndpointKind::Delete, "DELETE FROM t WHERE a = 1"))
            .await
            .unwrap();
        assert_eq!(d.affected_count, Some(1));
    }

    #[tokio::test]
    async fn submit_records_bind_by_name() {
        let conn = EmbeddedSql::provider().connect(&memory()).await.unwrap();
        conn.execute(req(EndpointKind::Update, "CREATE TABLE emp(name text, age int)"))
            .await
            .unwrap();
        let r = conn
            .execute(
                req(EndpointKind::Submit, "INSERT INTO emp VALUES (:name, :age)")
                    .with_payload(b"name,age\nann,31\nbob,40\n".to_vec(), PayloadFormat::Csv),
            )
            .await
            .unwrap();
        assert_eq!(r.affected_count, Some(2));
        let err = conn
            .execute(
                req(EndpointKind::Submit, "INSERT INTO emp VALUES (:name, :age)")
                    .with_payload(br#"[{"name": "cy"}]"#.to_vec(), PayloadFormat::Json),
            )
            .await
            .unwrap_err();
        assert!(matches!(err, ProviderError::InvalidPayload(_)));
        // The failed batch rolled back entirely.
        let r = conn
            .execute(req(EndpointKind::Query, "SELECT COUNT(*) AS c FROM emp"))
            .await
            .unwrap();
        assert_eq!(r.rows[0]["c"], json!(2));
    }

    #[tokio::test]
    async fn same_descriptor_shares_the_store() {
        let p = EmbeddedSql::provider();
        let a = p.connect(&memory()).await.unwrap();
        let b = p.connect(&memory()).await.unwrap();
        a.execute(req(EndpointKind::Update, "CREATE TABLE shared(x)"))
            .await
            .unwrap();
        b.execute(req(EndpointKind::Query, "SELECT * FROM shared"))
            .await
            .unwrap();
    }

    #[tokio::test]
    async fn missing_file_without_initialize_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = ConnectionDescriptor::default();
        ds.properties.insert(
            "path".into(),
            dir.path().join("nope.db").to_string_lossy().into_owned(),
        );
        let err = EmbeddedSql::provider().connect(&ds).await.err().unwrap();
        assert!(matches!(err, ProviderError::ConnectionRefused(_)));
    }

    #[tokio::test]
    async fn bad_sql_is_a_query_error() {
        let conn = EmbeddedSql::provider().connect(&memory()).await.unwrap();
        let err = conn
            .execute(req(EndpointKind::Query, "SELEC nonsense"))
            .await
            .unwrap_err();
        assert!(matches!(err, ProviderError::QueryError(_)));
    }
}
