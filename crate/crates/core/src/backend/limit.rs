use std::time::{Duration, Instant};

use parking_lot::Mutex;

/// Blocking token-bucket rate limiter shared by all workers of one backend
/// profile.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<BucketState>,
}

#[derive(Debug)]
struct BucketState {
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(capacity: u32, refill_per_sec: f64) -> Self {
        assert!(refill_per_sec > 0.0, "refill rate must be positive");
        let capacity = f64::from(capacity.max(1));
        Self {
            capacity,
            refill_per_sec,
            state: Mutex::new(BucketState {
                tokens: capacity,
                last: Instant::now(),
            }),
        }
    }

    /// Takes a token if one is available without waiting.
    pub fn try_acquire(&self) -> bool {
        self.take().is_none()
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        while let Some(wait) = self.take() {
            std::thread::sleep(wait);
        }
    }

    /// Consumes a token, or returns how long until one is available.
    fn take(&self) -> Option<Duration> {
        let mut st = self.state.lock();
        let now = Instant::now();
        let elapsed = now.duration_since(st.last).as_secs_f64();
        st.tokens = (st.tokens + elapsed * self.refill_per_sec).min(self.capacity);
        st.last = now;
        if st.tokens >= 1.0 {
            st.tokens -= 1.0;
            None
        } else {
            Some(Duration::from_secs_f64(
                (1.0 - st.tokens) / self.refill_per_sec,
            ))
        }
    }
}
