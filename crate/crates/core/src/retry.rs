//! Exponential backoff with full jitter for remote calls.

use std::thread;
use std::time::Duration;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 5,
            base_delay_ms: 1000,
            multiplier: 2.0,
        }
    }
}

/// Outcome of one failed attempt.
#[derive(Debug)]
pub enum AttemptError<E> {
    Retryable(E),
    Fatal(E),
}

impl RetryPolicy {
    /// Delay cap before attempt `n + 1` (0-based `n`); the actual sleep is
    /// uniform in `[0, cap]`.
    pub fn delay_cap(&self, n: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.multiplier.powi(n as i32);
        Duration::from_millis(ms.min(10.0 * 60.0 * 1000.0) as u64)
    }

    /// Runs `op` until it succeeds, fails fatally, or attempts run out.
    /// Returns the last error on failure.
    pub fn run<T, E: std::fmt::Display>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, AttemptError<E>>,
    ) -> Result<T, E> {
        let attempts = self.attempts.max(1);
        let mut n = 0;
        loop {
            match op(n) {
                Ok(v) => return Ok(v),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable(e)) => {
                    n += 1;
                    if n >= attempts {
                        return Err(e);
                    }
                    let cap = self.delay_cap(n - 1);
                    let sleep = rand::rng().random_range(0..=cap.as_millis() as u64);
                    debug!("attempt {n} failed ({e}); retrying in {sleep} ms");
                    thread::sleep(Duration::from_millis(sleep));
                }
            }
        }
    }
}
