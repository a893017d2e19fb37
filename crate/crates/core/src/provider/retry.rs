//! Retry with exponential backoff and a per-provider in-flight limiter.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, CompletionResult, ProviderError};

/// Backoff schedule: attempt n sleeps base * 2^(n-1) plus jitter, capped.
/// Only transient errors are retried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
}

fn default_backoff_cap_ms() -> u64 {
    10_000
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            backoff_base_ms: 250,
            backoff_cap_ms: default_backoff_cap_ms(),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let exp = self.backoff_base_ms.saturating_mul(1u64 << attempt.min(16));
        let capped = exp.min(self.backoff_cap_ms);
        let jitter = if capped == 0 { 0 } else { rand::rng().random_range(0..=capped / 2) };
        Duration::from_millis(capped + jitter)
    }
}

/// Issue a request, retrying transient failures per the policy.
pub fn complete_with_retry(
    provider: &dyn ChatProvider,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<CompletionResult, ProviderError> {
    let attempts = policy.max_attempts.max(1);
    let mut last_error = None;
    for attempt in 0..attempts {
        match provider.complete(request) {
            Ok(result) => return Ok(result),
            Err(e) if e.is_transient() && attempt + 1 < attempts => {
                std::thread::sleep(policy.backoff(attempt));
                last_error = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_error.expect("loop either returned or recorded an error"))
}

/// Caps the number of in-flight requests per provider.
pub struct InflightLimiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl InflightLimiter {
    pub fn new(max: usize) -> Self {
        InflightLimiter {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightGuard<'_> {
        let mut count = self.in_flight.lock().unwrap();
        while *count >= self.max {
            count = self.freed.wait(count).unwrap();
        }
        *count += 1;
        InflightGuard { limiter: self }
    }
}

pub struct InflightGuard<'a> {
    limiter: &'a InflightLimiter,
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let mut count = self.limiter.in_flight.lock().unwrap();
        *count -= 1;
        self.limiter.freed.notify_one();
    }
}
