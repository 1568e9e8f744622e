//! Time sources. Everything stateful takes nanoseconds from a [`Clock`] so
//! that the simulator can drive it deterministically.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

pub const NANOS_PER_SEC: u64 = 1_000_000_000;

pub trait Clock: Send + Sync {
    fn now_ns(&self) -> u64;
}

/// Manually advanced clock.
#[derive(Debug, Default)]
pub struct SimClock(AtomicU64);

impl SimClock {
    pub fn new(start_ns: u64) -> Self {
        SimClock(AtomicU64::new(start_ns))
    }

    pub fn set(&self, ns: u64) {
        self.0.fetch_max(ns, Ordering::SeqCst);
    }

    pub fn advance(&self, ns: u64) -> u64 {
        self.0.fetch_add(ns, Ordering::SeqCst) + ns
    }
}

impl Clock for SimClock {
    fn now_ns(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Monotonic wall clock counted from construction.
#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now_ns(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_clock_never_goes_back() {
        let c = SimClock::new(10);
        c.set(5);
        assert_eq!(c.now_ns(), 10);
        assert_eq!(c.advance(5), 15);
        c.set(100);
        assert_eq!(c.now_ns(), 100);
    }
}
