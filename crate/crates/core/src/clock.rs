//! Injectable time sources. The runtime never reads the system clock directly.

use std::time::Instant;

pub trait Clock: Send {
    /// Milliseconds since an arbitrary, fixed origin.
    fn now_ms(&mut self) -> u64;
}

#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&mut self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }
}

/// Simulated clock that advances by `tick_ms` after every read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimClock {
    pub now: u64,
    pub tick_ms: u64,
}

impl SimClock {
    pub fn new(start_ms: u64, tick_ms: u64) -> Self {
        Self { now: start_ms, tick_ms }
    }

    /// A clock that never moves.
    pub fn fixed(at_ms: u64) -> Self {
        Self::new(at_ms, 0)
    }
}

impl Clock for SimClock {
    fn now_ms(&mut self) -> u64 {
        let t = self.now;
        self.now = self.now.saturating_add(self.tick_ms);
        t
    }
}
