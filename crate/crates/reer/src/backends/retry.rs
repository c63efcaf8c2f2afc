//! Retry and concurrency-limit wrappers, composable around any backend.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::BackendError;

use super::{BackendReply, CompletionRequest, TextCompletion};

/// Exponential backoff schedule. Attempt n sleeps
/// `base_delay_ms * 2^(n-1)`, capped at `max_delay_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 50,
            max_delay_ms: 2_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << (attempt - 1).min(20));
        Duration::from_millis(exp.min(self.max_delay_ms))
    }
}

fn retryable(err: &BackendError) -> bool {
    matches!(err, BackendError::Transport { .. } | BackendError::Io(_))
}

/// Retries transport failures up to the policy's budget; protocol
/// errors fail immediately. Successful replies carry the attempt count.
pub struct Retrying<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B: TextCompletion> Retrying<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Retrying<B> {
        Retrying { inner, policy }
    }
}

impl<B: TextCompletion> TextCompletion for Retrying<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<BackendReply, BackendError> {
        let max = self.policy.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.inner.complete(req) {
                Ok(mut reply) => {
                    reply.attempts = attempt;
                    return Ok(reply);
                }
                Err(err) if retryable(&err) && attempt < max => {
                    log::warn!(
                        "backend {} attempt {attempt}/{max} failed, retrying: {err}",
                        self.inner.id()
                    );
                    std::thread::sleep(self.policy.delay(attempt));
                }
                Err(err) => {
                    return Err(match err {
                        BackendError::Transport { message, .. } => BackendError::Transport {
                            attempts: attempt,
                            message,
                        },
                        other => other,
                    });
                }
            }
        }
    }
}

/// Counting semaphore; `acquire` blocks until a permit is free.
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Semaphore {
        Semaphore {
            permits: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut available = self.permits.lock().unwrap();
        while *available == 0 {
            available = self.freed.wait(available).unwrap();
        }
        *available -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.freed.notify_one();
    }
}

/// Caps concurrent in-flight calls to the wrapped backend.
pub struct ConcurrencyLimited<B> {
    inner: B,
    semaphore: Semaphore,
}

impl<B: TextCompletion> ConcurrencyLimited<B> {
    pub fn new(inner: B, max_in_flight: usize) -> ConcurrencyLimited<B> {
        ConcurrencyLimited {
            inner,
            semaphore: Semaphore::new(max_in_flight.max(1)),
        }
    }
}

impl<B: TextCompletion> TextCompletion for ConcurrencyLimited<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<BackendReply, BackendError> {
        let _permit = self.semaphore.acquire();
        self.inner.complete(req)
    }
}
