use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const DEFAULT_RATE_PPS: u32 = 10_000;
/// A full TTL fan plus the segment it duplicates, with a little slack.
pub const DEFAULT_BURST: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacerConfig {
    pub rate_pps: u32,
    pub burst: u32,
}

impl Default for PacerConfig {
    fn default() -> Self {
        PacerConfig { rate_pps: DEFAULT_RATE_PPS, burst: DEFAULT_BURST }
    }
}

#[derive(Debug)]
struct Gcra {
    interval: Duration,
    tolerance: Duration,
    // theoretical arrival time of the next conforming emission
    tat: Duration,
}

/// Global send pacer (generic cell rate algorithm). Cloning shares state.
///
/// Over any window of `W` seconds at most `rate_pps * W + burst` emissions
/// are scheduled.
#[derive(Debug, Clone)]
pub struct Pacer {
    inner: Arc<Mutex<Gcra>>,
}

impl Pacer {
    /// # Panics
    /// If `rate_pps` is zero; configs are validated before this point.
    pub fn new(config: PacerConfig) -> Pacer {
        assert!(config.rate_pps > 0, "pacer rate must be positive");
        // rounded up so the rate is never exceeded
        let interval = Duration::from_nanos(1_000_000_000u64.div_ceil(u64::from(config.rate_pps)));
        let tolerance = interval * config.burst.saturating_sub(1);
        Pacer { inner: Arc::new(Mutex::new(Gcra { interval, tolerance, tat: Duration::ZERO })) }
    }

    /// Reserves one emission slot at or after `now` and returns its time.
    pub fn reserve(&self, now: Duration) -> Duration {
        let mut g = self.inner.lock().expect("pacer lock poisoned");
        let earliest = g.tat.saturating_sub(g.tolerance);
        let at = now.max(earliest);
        g.tat = g.tat.max(at) + g.interval;
        at
    }
}
