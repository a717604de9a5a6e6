//! Bounded LRU cache of successful authentication decisions.
//!
//! Keys are SHA-256 digests of the presented credential, so raw credentials
//! never sit in memory longer than the request that carried them.

use std::num::NonZeroUsize;
use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};
use lru::LruCache;

use super::Principal;

pub const AUTH_CACHE_CAPACITY: usize = 10_000;

struct Entry {
    principal: Principal,
    fingerprint: Option<String>,
    stored_at: DateTime<Utc>,
}

pub struct AuthCache {
    ttl: Duration,
    entries: Mutex<LruCache<[u8; 32], Entry>>,
}

impl AuthCache {
    pub fn new(capacity: usize, ttl: std::time::Duration) -> Self {
        AuthCache {
            ttl: Duration::from_std(ttl).unwrap_or(Duration::MAX),
            entries: Mutex::new(LruCache::new(
                NonZeroUsize::new(capacity.max(1)).expect("capacity >= 1"),
            )),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.ttl > Duration::zero()
    }

    /// A cached principal, if present, still within TTL and not past its own
    /// credential expiry.
    pub fn get(&self, key: &[u8; 32], now: DateTime<Utc>) -> Option<Principal> {
        if !self.is_enabled() {
            return None;
        }
        let mut entries = self.entries.lock().expect("auth cache poisoned");
        let fresh = entries.get(key).map(|e| {
            now < e.stored_at + self.ttl && e.principal.expires_at.is_none_or(|exp| now < exp)
        })?;
        if fresh {
            entries.get(key).map(|e| e.principal.clone())
        } else {
            entries.pop(key);
            None
        }
    }

    pub fn put(
        &self,
        key: [u8; 32],
        principal: Principal,
        fingerprint: Option<String>,
        now: DateTime<Utc>,
    ) {
        if !self.is_enabled() {
            return;
        }
        self.entries.lock().expect("auth cache poisoned").put(
            key,
            Entry {
                principal,
                fingerprint,
                stored_at: now,
            },
        );
    }

    /// Drops every entry for `subject`.
    pub fn invalidate_subject(&self, subject: &str) {
        self.retain(|e| e.principal.subject != subject);
    }

    /// Drops the entry created from the API key with this fingerprint.
    pub fn invalidate_fingerprint(&self, fingerprint: &str) {
        self.retain(|e| e.fingerprint.as_deref() != Some(fingerprint));
    }

    pub fn clear(&self) {
        self.entries.lock().expect("auth cache poisoned").clear();
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("auth cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn retain(&self, keep: impl Fn(&Entry) -> bool) {
        let mut entries = self.entries.lock().expect("auth cache poisoned");
        let doomed: Vec<[u8; 32]> = entries
            .iter()
            .filter(|(_, e)| !keep(e))
            .map(|(k, _)| *k)
            .collect();
        for k in doomed {
            entries.pop(&k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::security::PrincipalSource;

    fn p(subject: &str) -> Principal {
        Principal {
            subject: subject.into(),
            roles: Default::default(),
            source: PrincipalSource::ApiKey,
            expires_at: None,
        }
    }

    #[test]
    fn ttl_expires_entries() {
        let c = AuthCache::new(4, std::time::Duration::from_secs(10));
        let t0 = Utc::now();
        c.put([1; 32], p("a"), None, t0);
        assert!(c.get(&[1; 32], t0 + Duration::seconds(9)).is_some());
        assert!(c.get(&[1; 32], t0 + Duration::seconds(10)).is_none());
        assert!(c.is_empty());
    }

    #[test]
    fn capacity_is_bounded() {
        let c = AuthCache::new(2, std::time::Duration::from_secs(10));
        let t0 = Utc::now();
        for i in 0..5u8 {
            c.put([i; 32], p("a"), None, t0);
        }
        assert_eq!(c.len(), 2);
        assert!(c.get(&[4; 32], t0).is_some());
        assert!(c.get(&[0; 32], t0).is_none());
    }

    #[test]
    fn invalidation_by_subject_and_fingerprint() {
        let c = AuthCache::new(8, std::time::Duration::from_secs(10));
        let t0 = Utc::now();
        c.put([1; 32], p("a"), Some("f1".into()), t0);
        c.put([2; 32], p("a"), Some("f2".into()), t0);
        c.put([3; 32], p("b"), Some("f3".into()), t0);
        c.invalidate_fingerprint("f3");
        assert!(c.get(&[3; 32], t0).is_none());
        c.invalidate_subject("a");
        assert!(c.is_empty());
    }

    #[test]
    fn zero_ttl_disables_caching() {
        let c = AuthCache::new(8, std::time::Duration::ZERO);
        let t0 = Utc::now();
        c.put([1; 32], p("a"), None, t0);
        assert!(c.get(&[1; 32], t0).is_none());
    }
}
