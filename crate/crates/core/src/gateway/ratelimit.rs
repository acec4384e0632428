use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Spaces admissions at least `1 / rps` apart. Over any window of length
/// `w` at most `floor(w * rps) + 1` requests are admitted.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        assert!(requests_per_second > 0.0, "rate limit must be positive");
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / requests_per_second),
            next_slot: Mutex::new(None),
        }
    }

    /// Blocks until the caller may issue a request.
    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let slot = match *next {
                Some(t) if t > now => t,
                _ => now,
            };
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spaces_requests() {
        let l = RateLimiter::new(50.0);
        let start = Instant::now();
        for _ in 0..11 {
            l.acquire();
        }
        // 11 admissions need 10 intervals of 20ms
        assert!(start.elapsed() >= Duration::from_millis(195));
    }

    #[test]
    #[should_panic]
    fn zero_rate_rejected() {
        RateLimiter::new(0.0);
    }
}
