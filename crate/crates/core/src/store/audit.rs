//! The serialized audit writer.
//!
//! Request handlers only enqueue. A single thread drains the queue, writes
//! batches to the audit store and mirrors each stored batch to the access
//! log, so both sinks always hold the same records. Ids are taken and the
//! record sent under one lock, which makes queue order equal id order.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::Serialize;
use tokio::sync::oneshot;
use tracing::{error, warn};

use super::access_log::{format_access_line, RollingLog};
use super::{AuditRecord, AuditStore, StoreError};
use crate::model::AuditMode;

const MAX_BATCH: usize = 512;

/// What a request handler knows about a finished request.
#[derive(Debug, Clone)]
pub struct AuditEntry {
    pub subject: String,
    pub method: String,
    pub path: String,
    pub status: u16,
    pub latency_micros: u64,
    pub remote: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditorStats {
    pub enqueued: u64,
    pub written: u64,
    pub failed: u64,
}

type Ack = oneshot::Sender<Result<u64, StoreError>>;

enum Msg {
    Record(AuditRecord, Option<Ack>),
    Flush(Box<dyn FnOnce() + Send>),
}

struct Counters {
    enqueued: AtomicU64,
    written: AtomicU64,
    failed: AtomicU64,
}

struct Queue {
    next_id: u64,
    tx: Option<Sender<Msg>>,
}

pub struct Auditor {
    enabled: bool,
    mode: AuditMode,
    instance: String,
    queue: Mutex<Queue>,
    counters: Arc<Counters>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl Auditor {
    /// Starts the writer thread. `log` receives one line per stored record.
    pub fn start(
        store: Arc<dyn AuditStore>,
        log: Option<RollingLog>,
        mode: AuditMode,
        flush_interval: Duration,
        instance: &str,
    ) -> Result<Self, StoreError> {
        let next_id = store.max_audit_id()? + 1;
        let (tx, rx) = mpsc::channel();
        let counters = Arc::new(Counters {
            enqueued: AtomicU64::new(0),
            written: AtomicU64::new(0),
            failed: AtomicU64::new(0),
        });
        let writer = Writer {
            store,
            log,
            interval: flush_interval.max(Duration::from_millis(1)),
            counters: Arc::clone(&counters),
        };
        let thread = std::thread::Builder::new()
            .name("audit-writer".into())
            .spawn(move || writer.run(rx))
            .map_err(|e| StoreError::Io(e.to_string()))?;
        Ok(Auditor {
            enabled: true,
            mode,
            instance: instance.to_string(),
            queue: Mutex::new(Queue {
                next_id,
                tx: Some(tx),
            }),
            counters,
            thread: Mutex::new(Some(thread)),
        })
    }

    /// An auditor that records nothing.
    pub fn disabled() -> Self {
        Auditor {
            enabled: false,
            mode: AuditMode::Buffered,
            instance: String::new(),
            queue: Mutex::new(Queue { next_id: 1, tx: None }),
            counters: Arc::new(Counters {
                enqueued: AtomicU64::new(0),
                written: AtomicU64::new(0),
                failed: AtomicU64::new(0),
            }),
            thread: Mutex::new(None),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn mode(&self) -> AuditMode {
        self.mode
    }

    pub fn stats(&self) -> AuditorStats {
        AuditorStats {
            enqueued: self.counters.enqueued.load(Ordering::Relaxed),
            written: self.counters.written.load(Ordering::Relaxed),
            failed: self.counters.failed.load(Ordering::Relaxed),
        }
    }

    /// Records one request. Returns the assigned id, or `None` when auditing
    /// is off. In synchronous mode this resolves only once the record is
    /// durable in the store.
    pub async fn record(&self, entry: AuditEntry) -> Result<Option<u64>, StoreError> {
        if !self.enabled {
            return Ok(None);
        }
        let (ack, done) = match self.mode {
            AuditMode::Sync => {
                let (tx, rx) = oneshot::channel();
                (Some(tx), Some(rx))
            }
            AuditMode::Buffered => (None, None),
        };
        let id = self.enqueue(entry, ack)?;
        if let Some(done) = done {
            done.await
                .map_err(|_| StoreError::Io("audit writer stopped".into()))??;
        }
        Ok(Some(id))
    }

    fn enqueue(&self, entry: AuditEntry, ack: Option<Ack>) -> Result<u64, StoreError> {
        let mut q = self.queue.lock().expect("audit queue poisoned");
        let id = q.next_id;
        let record = AuditRecord {
            id,
            timestamp: Utc::now(),
            subject: entry.subject,
            method: entry.method,
            path: entry.path,
            status: entry.status,
            latency_micros: entry.latency_micros,
            instance_name: self.instance.clone(),
            remote: entry.remote,
            bytes: entry.bytes,
        };
        let tx = q
            .tx
            .as_ref()
            .ok_or_else(|| StoreError::Io("audit writer stopped".into()))?;
        tx.send(Msg::Record(record, ack))
            .map_err(|_| StoreError::Io("audit writer stopped".into()))?;
        q.next_id += 1;
        self.counters.enqueued.fetch_add(1, Ordering::Relaxed);
        Ok(id)
    }

    /// Waits until everything enqueued before the call is written.
    pub async fn flush(&self) {
        let (tx, rx) = oneshot::channel();
        if self.send_flush(Box::new(move || {
            let _ = tx.send(());
        })) {
            let _ = rx.await;
        }
    }

    /// Blocking variant of [`Auditor::flush`] for non-async callers.
    pub fn flush_blocking(&self) {
        let (tx, rx) = mpsc::channel();
        if self.send_flush(Box::new(move || {
            let _ = tx.send(());
        })) {
            let _ = rx.recv();
        }
    }

    fn send_flush(&self, f: Box<dyn FnOnce() + Send>) -> bool {
        let q = self.queue.lock().expect("audit queue poisoned");
        q.tx.as_ref().is_some_and(|tx| tx.send(Msg::Flush(f)).is_ok())
    }

    /// Drains the queue and stops the writer thread.
    pub fn shutdown(&self) {
        self.queue.lock().expect("audit queue poisoned").tx = None;
        if let Some(handle) = self.thread.lock().expect("audit thread poisoned").take() {
            if handle.join().is_err() {
                error!("audit writer panicked");
            }
        }
    }
}

impl Drop for Auditor {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Writer {
    store: Arc<dyn AuditStore>,
    log: Option<RollingLog>,
    interval: Duration,
    counters: Arc<Counters>,
}

impl Writer {
    fn run(mut self, rx: Receiver<Msg>) {
        let mut batch: Vec<(AuditRecord, Option<Ack>)> = Vec::new();
        let mut waiters: Vec<Box<dyn FnOnce() + Send>> = Vec::new();
        let mut deadline: Option<Instant> = None;
        loop {
            let msg = match deadline {
                None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
                Some(d) => rx.recv_timeout(d.saturating_duration_since(Instant::now())),
            };
            let mut urgent = false;
            match msg {
                Ok(Msg::Record(r, ack)) => {
                    urgent |= ack.is_some();
                    batch.push((r, ack));
                    deadline.get_or_insert_with(|| Instant::now() + self.interval);
                }
                Ok(Msg::Flush(f)) => {
                    waiters.push(f);
                    urgent = true;
                }
                Err(RecvTimeoutError::Timeout) => urgent = true,
                Err(RecvTimeoutError::Disconnected) => {
                    self.write(&mut batch);
                    waiters.drain(..).for_each(|f| f());
                    return;
                }
            }
            if urgent || batch.len() >= MAX_BATCH {
                // Group-commit whatever else is already queued.
                while batch.len() < MAX_BATCH {
                    match rx.try_recv() {
                        Ok(Msg::Record(r, ack)) => batch.push((r, ack)),
                        Ok(Msg::Flush(f)) => waiters.push(f),
                        Err(_) => break,
                    }
                }
                self.write(&mut batch);
                waiters.drain(..).for_each(|f| f());
                deadline = None;
            }
        }
    }

    fn write(&mut self, batch: &mut Vec<(AuditRecord, Option<Ack>)>) {
        if batch.is_empty() {
            return;
        }
        let records: Vec<AuditRecord> = batch.iter().map(|(r, _)| r.clone()).collect();
        let result = self.store.append_audit_batch(&records);
        match &result {
            Ok(()) => {
                self.counters
                    .written
                    .fetch_add(records.len() as u64, Ordering::Relaxed);
                if let Some(log) = &mut self.log {
                    let res = records
                        .iter()
                        .try_for_each(|r| log.write_line(&format_access_line(r)))
                        .and_then(|()| log.flush());
                    if let Err(e) = res {
                        warn!(error = %e, "access log write failed");
                    }
                }
            }
            Err(e) => {
                self.counters
                    .failed
                    .fetch_add(records.len() as u64, Ordering::Relaxed);
                error!(error = %e, records = records.len(), "audit batch write failed");
            }
        }
        for (r, ack) in batch.drain(..) {
            if let Some(ack) = ack {
                let _ = ack.send(result.clone().map(|()| r.id));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{AuditFilter, Page, SqliteStore};

    fn entry(i: u16) -> AuditEntry {
        AuditEntry {
            subject: "s".into(),
            method: "GET".into(),
            path: format!("/p/{i}"),
            status: 200,
            latency_micros: 5,
            remote: "127.0.0.1".into(),
            bytes: 1,
        }
    }

    #[tokio::test]
    async fn sync_mode_is_durable_on_return() {
        let store = Arc::new(SqliteStore::open_in_memory().unwrap());
        let a = Auditor::start(store.clone(), None, AuditMode::Sync, Duration::from_secs(1), "x")
            .unwrap();
        let id = a.record(entry(1)).await.unwrap().unwrap();
        assert_eq!(id, 1);
        assert_eq!(store.count_audit(&AuditFilter::default()).unwrap(), 1);
    }

    #[tokio::test]
    async fn buffered_mode_flushes_within_interval() {
        let store = Arc::new(SqliteStore::open_in_memory().unwrap());
        let a = Auditor::start(
            store.clone(),
            None,
            AuditMode::Buffered,
            Duration::from_millis(50),
            "x",
        )
        .unwrap();
        for i in 0..10 {
            a.record(entry(i)).await.unwrap();
        }
        tokio::time::sleep(Duration::from_millis(300)).await;
        assert_eq!(store.count_audit(&AuditFilter::default()).unwrap(), 10);
        let recs = store.query_audit(&AuditFilter::default(), Page::new(0, 100)).unwrap();
        assert_eq!(recs.first().unwrap().id, 10);
    }

    #[tokio::test]
    async fn disabled_records_nothing() {
        let a = Auditor::disabled();
        assert_eq!(a.record(entry(1)).await.unwrap(), None);
        a.flush().await;
    }

    #[tokio::test]
    async fn ids_continue_after_restart() {
        let store = Arc::new(SqliteStore::open_in_memory().unwrap());
        {
            let a = Auditor::start(store.clone(), None, AuditMode::Buffered, Duration::from_millis(5), "x")
                .unwrap();
            a.record(entry(1)).await.unwrap();
            a.record(entry(2)).await.unwrap();
        }
        let a = Auditor::start(store.clone(), None, AuditMode::Sync, Duration::from_millis(5), "x")
            .unwrap();
        assert_eq!(a.record(entry(3)).await.unwrap(), Some(3));
    }
}
