//! Per-device attestation budget.

use std::collections::{HashMap, VecDeque};
use std::hash::Hash;

pub const DEFAULT_CAPACITY: u32 = 5;
pub const DEFAULT_INTERVAL_MICROS: u64 = 60_000_000;

/// Token bucket where every spent token comes back exactly one interval after
/// it was spent. Equivalent to a sliding-window log: a key never gets more
/// than `capacity` grants inside any half-open window of `interval` length.
///
/// Time is clamped to be non-decreasing per key, so a schedule with
/// out-of-order timestamps is charged as if the late packet arrived at the
/// latest time seen.
#[derive(Debug, Clone)]
pub struct RateLimiter<K = crate::packet::Mac> {
    capacity: u32,
    interval: u64,
    grants: HashMap<K, VecDeque<u64>>,
    last_seen: HashMap<K, u64>,
}

impl<K: Eq + Hash + Clone> RateLimiter<K> {
    /// Panics if `interval_micros` is zero.
    pub fn new(capacity: u32, interval_micros: u64) -> Self {
        assert!(
            interval_micros > 0,
            "rate limiter interval must be positive"
        );
        RateLimiter {
            capacity,
            interval: interval_micros,
            grants: HashMap::new(),
            last_seen: HashMap::new(),
        }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn interval_micros(&self) -> u64 {
        self.interval
    }

    fn clamp(&mut self, key: &K, now: u64) -> u64 {
        let last = self.last_seen.entry(key.clone()).or_insert(now);
        *last = (*last).max(now);
        *last
    }

    /// Tokens left for `key` at `now`.
    pub fn available(&mut self, key: &K, now: u64) -> u32 {
        let now = self.clamp(key, now);
        let interval = self.interval;
        let window = self.grants.entry(key.clone()).or_default();
        while window.front().is_some_and(|&t| t + interval <= now) {
            window.pop_front();
        }
        self.capacity.saturating_sub(window.len() as u32)
    }

    /// Spends a token if one is available.
    pub fn try_acquire(&mut self, key: &K, now: u64) -> bool {
        if self.available(key, now) == 0 {
            return false;
        }
        let now = self.last_seen[key];
        self.grants
            .get_mut(key)
            .expect("window created")
            .push_back(now);
        true
    }
}

impl Default for RateLimiter {
    fn default() -> Self {
        RateLimiter::new(DEFAULT_CAPACITY, DEFAULT_INTERVAL_MICROS)
    }
}
