use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateLimit {
    pub limit: usize,
    pub window_secs: i64,
}

impl Default for RateLimit {
    fn default() -> Self {
        RateLimit {
            limit: 100,
            window_secs: 60,
        }
    }
}

/// Sliding-window log limiter keyed by an arbitrary string.
///
/// A call at time `t` is admitted iff fewer than `limit` calls were admitted
/// in `(t - window, t]`.
pub struct RateLimiter {
    config: RateLimit,
    hits: Mutex<HashMap<String, VecDeque<i64>>>,
}

impl RateLimiter {
    pub fn new(config: RateLimit) -> Self {
        RateLimiter {
            config,
            hits: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> RateLimit {
        self.config
    }

    pub fn check(&self, key: &str, now: i64) -> bool {
        let mut hits = self.hits.lock().expect("rate limiter lock");
        let log = hits.entry(key.to_string()).or_default();
        while log.front().is_some_and(|&t| t <= now - self.config.window_secs) {
            log.pop_front();
        }
        if log.len() < self.config.limit {
            log.push_back(now);
            true
        } else {
            false
        }
    }
}
