//! Wall-clock abstraction so timing fields can be zeroed for
//! byte-reproducible runs.

use std::time::{SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    /// Seconds since the Unix epoch, or `None` when timing is suppressed.
    fn unix_seconds(&self) -> Option<u64>;

    /// Measures `f`'s wall time in seconds; 0.0 when timing is suppressed.
    fn time<T>(&self, f: impl FnOnce() -> T) -> (T, f64)
    where
        Self: Sized,
    {
        let start = std::time::Instant::now();
        let out = f();
        let elapsed = start.elapsed().as_secs_f64();
        if self.unix_seconds().is_some() {
            (out, elapsed)
        } else {
            (out, 0.0)
        }
    }
}

/// Reads the real system clock.
#[derive(Debug, Clone, Copy, Default)]
pub struct RealClock;

impl Clock for RealClock {
    fn unix_seconds(&self) -> Option<u64> {
        Some(
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        )
    }
}

/// Suppresses all timing: timestamps absent, durations reported as 0.0.
/// Used by deterministic runs so output files are byte-stable.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn unix_seconds(&self) -> Option<u64> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_clock_zeroes_durations() {
        let (value, secs) = NullClock.time(|| 41 + 1);
        assert_eq!(value, 42);
        assert_eq!(secs, 0.0);
    }

    #[test]
    fn real_clock_reports_time() {
        let (_, secs) = RealClock.time(|| std::thread::sleep(std::time::Duration::from_millis(5)));
        assert!(secs > 0.0);
        assert!(RealClock.unix_seconds().unwrap() > 1_700_000_000);
    }
}
