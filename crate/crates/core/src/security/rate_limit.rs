//! Sliding-window request limiting.
//!
//! Each scope key owns a log of admission timestamps. A request is admitted
//! when fewer than `limit` admissions fall inside the trailing window; the
//! check and the append happen under the key's map shard lock, so concurrent
//! callers can never over-admit.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};
use dashmap::DashMap;

use super::Principal;
use crate::model::{RateLimitPolicy, RateLimitScope};

const SWEEP_EVERY: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateDecision {
    Allow,
    /// Rejected; the caller may retry after this many whole seconds.
    Throttled { retry_after_secs: u64 },
}

impl RateDecision {
    pub fn is_allow(self) -> bool {
        matches!(self, RateDecision::Allow)
    }
}

pub struct RateLimiter {
    policy: Option<RateLimitPolicy>,
    window_micros: i64,
    logs: DashMap<String, VecDeque<i64>>,
    calls: AtomicU64,
}

impl RateLimiter {
    pub fn new(policy: Option<RateLimitPolicy>) -> Self {
        let window_micros = policy
            .as_ref()
            .map_or(0, |p| (p.window_seconds as i64).saturating_mul(1_000_000));
        RateLimiter {
            policy,
            window_micros,
            logs: DashMap::new(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn policy(&self) -> Option<&RateLimitPolicy> {
        self.policy.as_ref()
    }

    /// The bucket key and admission limit that apply to `principal`.
    pub fn scope(&self, principal: &Principal) -> Option<(String, u32)> {
        let policy = self.policy.as_ref()?;
        Some(match policy.scope {
            RateLimitScope::PerPrincipal => {
                (format!("p:{}", principal.subject), policy.requests_per_window)
            }
            RateLimitScope::PerRole => {
                // The caller's most generous role decides; ties go to the
                // alphabetically first role (roles iterate sorted).
                let mut best: Option<(&str, u32)> = None;
                for role in &principal.roles {
                    let limit = policy
                        .per_role_overrides
                        .get(role)
                        .copied()
                        .unwrap_or(policy.requests_per_window);
                    if best.is_none_or(|(_, b)| limit > b) {
                        best = Some((role, limit));
                    }
                }
                let (role, limit) = best.unwrap_or(("-", policy.requests_per_window));
                (format!("r:{role}"), limit)
            }
        })
    }

    pub fn check(&self, principal: &Principal, now: DateTime<Utc>) -> RateDecision {
        let Some((key, limit)) = self.scope(principal) else {
            return RateDecision::Allow;
        };
        let now_us = now.timestamp_micros();
        let decision = {
            let mut log = self.logs.entry(key).or_default();
            let horizon = now_us - self.window_micros;
            while log.front().is_some_and(|&t| t <= horizon) {
                log.pop_front();
            }
            if (log.len() as u64) < u64::from(limit) {
                log.push_back(now_us);
                RateDecision::Allow
            } else {
                // The oldest admission leaves the window at oldest + window.
                let oldest = *log.front().expect("limit >= 1 so log is non-empty");
                let wait_us = (oldest + self.window_micros - now_us).max(1);
                RateDecision::Throttled {
                    retry_after_secs: (wait_us as u64).div_ceil(1_000_000).max(1),
                }
            }
        };
        if self.calls.fetch_add(1, Ordering::Relaxed) % SWEEP_EVERY == SWEEP_EVERY - 1 {
            self.sweep(now_us);
        }
        decision
    }

    /// Forgets keys whose logs are entirely outside the window.
    fn sweep(&self, now_us: i64) {
        let horizon = now_us - self.window_micros;
        self.logs
            .retain(|_, log| log.back().is_some_and(|&t| t > horizon));
    }

    pub fn tracked_keys(&self) -> usize {
        self.logs.len()
    }
}
