use std::collections::HashMap;
use std::sync::Mutex;

/// Set of recently seen `jti` values.
///
/// Entries are kept until their expiry and purged lazily afterwards.
pub struct JtiReplayCache {
    window: i64,
    seen: Mutex<HashMap<String, i64>>,
}

impl JtiReplayCache {
    pub fn new(window_secs: i64) -> Self {
        JtiReplayCache {
            window: window_secs,
            seen: Mutex::new(HashMap::new()),
        }
    }

    pub fn window(&self) -> i64 {
        self.window
    }

    /// Records `jti` until `max(now + window, not_before_expiry)`. Returns
    /// `false` if it was already present and unexpired.
    pub fn insert_if_absent(&self, jti: &str, now: i64, not_before_expiry: i64) -> bool {
        let expires_at = (now + self.window).max(not_before_expiry);
        let mut seen = self.seen.lock().expect("replay cache lock");
        if seen.len() > 1024 {
            seen.retain(|_, exp| *exp > now);
        }
        match seen.get(jti) {
            Some(&exp) if exp > now => false,
            _ => {
                seen.insert(jti.to_string(), expires_at);
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.seen.lock().expect("replay cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn rejects_within_window_and_accepts_after() {
        let cache = JtiReplayCache::new(300);
        assert!(cache.insert_if_absent("a", 0, 0));
        assert!(!cache.insert_if_absent("a", 299, 0));
        assert!(cache.insert_if_absent("a", 300, 0));
        assert!(cache.insert_if_absent("b", 0, 1000));
        assert!(!cache.insert_if_absent("b", 900, 0));
    }

    #[test]
    fn purges_expired_entries() {
        let cache = JtiReplayCache::new(1);
        for i in 0..2000 {
            cache.insert_if_absent(&i.to_string(), 0, 0);
        }
        cache.insert_if_absent("late", 10, 0);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn concurrent_inserts_admit_one() {
        let cache = Arc::new(JtiReplayCache::new(300));
        let handles: Vec<_> = (0..16)
            .map(|_| {
                let cache = cache.clone();
                thread::spawn(move || cache.insert_if_absent("same", 0, 0))
            })
            .collect();
        let wins = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|w| *w)
            .count();
        assert_eq!(wins, 1);
    }
}
