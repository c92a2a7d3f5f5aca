//! Wall-clock and resident-memory measurement.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub const SAMPLE_INTERVAL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceStats {
    pub wall_ms: f64,
    /// Largest sampled resident set size of the process, 0 where unavailable.
    pub peak_rss_bytes: u64,
}

/// Current resident set size from `/proc/self/statm`.
pub fn current_rss_bytes() -> Option<u64> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * 4096)
}

/// Runs `f` while a background thread samples RSS every 100 ms.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, ResourceStats) {
    let peak = Arc::new(AtomicU64::new(current_rss_bytes().unwrap_or(0)));
    let done = Arc::new(AtomicBool::new(false));
    let sampler = {
        let (peak, done) = (Arc::clone(&peak), Arc::clone(&done));
        thread::spawn(move || {
            while !done.load(Ordering::Relaxed) {
                thread::park_timeout(SAMPLE_INTERVAL);
                if let Some(rss) = current_rss_bytes() {
                    peak.fetch_max(rss, Ordering::Relaxed);
                }
            }
        })
    };
    let start = Instant::now();
    let out = f();
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    if let Some(rss) = current_rss_bytes() {
        peak.fetch_max(rss, Ordering::Relaxed);
    }
    done.store(true, Ordering::Relaxed);
    sampler.thread().unpark();
    let _ = sampler.join();
    (
        out,
        ResourceStats {
            wall_ms,
            peak_rss_bytes: peak.load(Ordering::Relaxed),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measures_time_and_memory() {
        let (v, stats) = measure(|| {
            thread::sleep(Duration::from_millis(20));
            7
        });
        assert_eq!(v, 7);
        assert!(stats.wall_ms >= 20.0);
        if cfg!(target_os = "linux") {
            assert!(stats.peak_rss_bytes > 0);
        }
    }
}
