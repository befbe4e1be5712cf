//! Time sources. The simulator runs on a virtual clock that only moves when
//! the engine sleeps between polls; the local back-end uses wall time.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

/// Seconds since campaign start (virtual or wall).
pub type Timestamp = u64;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;

    /// Advance time by `secs`. Virtual clocks jump; wall clocks sleep.
    fn sleep(&self, secs: u64);
}

/// Virtual clock: `sleep` advances instantly, no wall time passes.
#[derive(Default)]
pub struct SimClock {
    now: AtomicU64,
}

impl SimClock {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep(&self, secs: u64) {
        self.now.fetch_add(secs, Ordering::SeqCst);
    }
}

/// Wall clock measured from construction. `speedup` > 1 shortens real
/// sleeps proportionally (used by tests driving the local back-end).
pub struct WallClock {
    start: Instant,
    speedup: u64,
}

impl WallClock {
    pub fn new() -> Arc<Self> {
        Self::with_speedup(1)
    }

    pub fn with_speedup(speedup: u64) -> Arc<Self> {
        Arc::new(Self {
            start: Instant::now(),
            speedup: speedup.max(1),
        })
    }
}

impl Clock for WallClock {
    fn now(&self) -> Timestamp {
        self.start.elapsed().as_secs() * self.speedup
    }

    fn sleep(&self, secs: u64) {
        std::thread::sleep(std::time::Duration::from_millis(secs * 1000 / self.speedup));
    }
}
