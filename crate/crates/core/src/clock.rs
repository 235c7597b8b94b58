//! Injectable time source. All schedule arithmetic uses abstract integer
//! time units so simulations can compress days into steps.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    fn now(&self) -> u64;
}

/// A clock that only moves when told to. Clones share the same time.
#[derive(Debug, Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start: u64) -> Self {
        Self(Arc::new(AtomicU64::new(start)))
    }

    pub fn set(&self, t: u64) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, dt: u64) {
        self.0.fetch_add(dt, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Wall clock measured in units of `unit_secs` seconds since the Unix epoch.
#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    pub unit_secs: u64,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { unit_secs: 86_400 }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        secs / self.unit_secs.max(1)
    }
}
