//! Time sources. Protocol timeouts read [`Clock::now`], a monotonic offset;
//! audit timestamps and lockout expiry use [`Clock::unix_time`].

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary, fixed origin.
    fn now(&self) -> Duration;

    /// Wall-clock seconds since the Unix epoch.
    fn unix_time(&self) -> u64;

    /// Waits for `d`. Virtual clocks just move forward.
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn unix_time(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to. Clones share the same time.
#[derive(Debug, Clone)]
pub struct ManualClock {
    now: Arc<Mutex<Duration>>,
    unix_origin: u64,
}

impl ManualClock {
    pub fn new(unix_origin: u64) -> Self {
        ManualClock {
            now: Arc::new(Mutex::new(Duration::ZERO)),
            unix_origin,
        }
    }

    pub fn advance(&self, dt: Duration) {
        *self.now.lock().unwrap() += dt;
    }

    /// Moves to `t` if it is later than the current time.
    pub fn advance_to(&self, t: Duration) {
        let mut now = self.now.lock().unwrap();
        if t > *now {
            *now = t;
        }
    }
}

impl Default for ManualClock {
    fn default() -> Self {
        // 2023-11-14T22:13:20Z, an arbitrary fixed origin for tests
        Self::new(1_700_000_000)
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn unix_time(&self) -> u64 {
        self.unix_origin + self.now().as_secs()
    }

    fn sleep(&self, d: Duration) {
        self.advance(d)
    }
}
