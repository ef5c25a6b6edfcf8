//! Time sources shared by the transport, scheduler and harness.
//!
//! All timestamps are offsets from the start of a run, expressed as
//! [`Duration`]. A virtual clock only moves when someone advances it, which
//! makes whole-system runs bitwise reproducible; the wall clock follows
//! [`Instant`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Deterministic clock that advances in nanoseconds.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now_ns: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn now(&self) -> Duration {
        Duration::from_nanos(self.now_ns.load(Ordering::Acquire))
    }

    /// Moves the clock forward to `t`. Never moves it backwards.
    pub fn advance_to(&self, t: Duration) {
        self.now_ns.fetch_max(as_nanos(t), Ordering::AcqRel);
    }

    pub fn advance(&self, d: Duration) {
        self.now_ns.fetch_add(as_nanos(d), Ordering::AcqRel);
    }
}

#[derive(Debug, Clone)]
pub enum Clock {
    Virtual(VirtualClock),
    Wall(Instant),
}

impl Clock {
    pub fn virtual_clock() -> Self {
        Clock::Virtual(VirtualClock::new())
    }

    pub fn wall() -> Self {
        Clock::Wall(Instant::now())
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    pub fn now(&self) -> Duration {
        match self {
            Clock::Virtual(c) => c.now(),
            Clock::Wall(start) => start.elapsed(),
        }
    }

    /// Blocks (wall) or jumps (virtual) until `t`.
    pub fn wait_until(&self, t: Duration) {
        match self {
            Clock::Virtual(c) => c.advance_to(t),
            Clock::Wall(start) => {
                let now = start.elapsed();
                if t > now {
                    std::thread::sleep(t - now);
                }
            }
        }
    }

    /// Virtual only: moves time forward to `t`. A no-op on the wall clock.
    pub fn advance_to(&self, t: Duration) {
        if let Clock::Virtual(c) = self {
            c.advance_to(t);
        }
    }
}

#[inline]
pub fn as_nanos(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}

pub fn from_micros_f64(us: f64) -> Duration {
    Duration::from_nanos((us.max(0.0) * 1_000.0).round() as u64)
}

pub fn from_millis_f64(ms: f64) -> Duration {
    Duration::from_nanos((ms.max(0.0) * 1_000_000.0).round() as u64)
}

pub fn millis_f64(d: Duration) -> f64 {
    d.as_secs_f64() * 1_000.0
}
