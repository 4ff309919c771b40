//! Uniform access to text-generation backends.
//!
//! [`Gateway`] wraps a [`Backend`] with validation, retries with exponential
//! backoff, an optional token-bucket rate limit and the shared [`RunLedger`].
//! It is `Sync`; callers fan work out with [`Gateway::map_bounded`], which
//! caps the number of requests in flight.

mod cost;
mod http;
mod ledger;
mod mock;
mod rate_limit;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::Turn;

pub use cost::{estimate_cost, CostError, CostReport, OptimizationCostParams};
pub use http::{ChatCompletionBackend, HttpSettings};
pub use ledger::{LedgerSnapshot, RunLedger};
pub use mock::{MockBackend, MockRule, MockScript, MockScriptError};
pub use rate_limit::TokenBucket;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleTag {
    Evol,
    Optimizer,
    Responder,
    Tagger,
}

impl RoleTag {
    pub const ALL: [RoleTag; 4] = [RoleTag::Evol, RoleTag::Optimizer, RoleTag::Responder, RoleTag::Tagger];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::Evol => "evol",
            RoleTag::Optimizer => "optimizer",
            RoleTag::Responder => "responder",
            RoleTag::Tagger => "tagger",
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoleTag::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role tag {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system_prompt: Option<String>,
    /// Earlier conversation turns sent before the user prompt.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<Turn>,
    pub user_prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub role_tag: RoleTag,
}

impl GenerationRequest {
    pub fn new(role_tag: RoleTag, user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: None,
            history: Vec::new(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 2048,
            role_tag,
        }
    }

    pub fn sampling(mut self, temperature: f64, top_p: f64) -> Self {
        self.temperature = temperature;
        self.top_p = top_p;
        self
    }

    pub fn max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn history(mut self, history: Vec<Turn>) -> Self {
        self.history = history;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: String| Err(GatewayError::InvalidRequest(m));
        if self.user_prompt.is_empty() {
            return invalid("user_prompt is empty".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return invalid(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return invalid(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if self.max_tokens == 0 {
            return invalid("max_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Errors a backend reports for a single attempt.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("{0}")]
    Fatal(String),
}

impl BackendError {
    fn is_retryable(&self) -> bool {
        !matches!(self, BackendError::Fatal(_))
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("backend error: {0}")]
    Api(String),
}

/// One attempt at completing a request.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay_for(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    limiter: Option<TokenBucket>,
    ledger: RunLedger,
    max_in_flight: usize,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("retry", &self.retry)
            .field("max_in_flight", &self.max_in_flight)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            limiter: None,
            ledger: RunLedger::default(),
            max_in_flight: 8,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: Option<u32>) -> Self {
        self.limiter = requests_per_minute.map(TokenBucket::per_minute);
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.ledger
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Completes `request`, retrying transient failures. Every request that
    /// reaches the backend is counted once under `(role, phase)`.
    pub fn generate(&self, request: &GenerationRequest, phase: &str) -> Result<String, GatewayError> {
        request.validate()?;
        let mut attempt = 0u32;
        let result = loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match self.backend.complete(request) {
                Ok(text) => break Ok(text),
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    tracing::debug!(role = %request.role_tag, phase, attempt, error = %e, "retrying");
                    self.ledger.record_retry();
                    std::thread::sleep(self.retry.delay_for(attempt));
                    attempt += 1;
                }
                Err(BackendError::Fatal(message)) => break Err(GatewayError::Api(message)),
                Err(e) => {
                    break Err(GatewayError::Exhausted {
                        attempts: attempt + 1,
                        last: e.to_string(),
                    })
                }
            }
        };
        self.ledger.record_call(request.role_tag, phase, result.is_err());
        result
    }

    /// Applies `f` to every item with at most `max_in_flight` running at once.
    /// Output order matches input order.
    pub fn map_bounded<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        parallel_map(items, self.max_in_flight, f)
    }
}

/// Order-preserving map over `items` on up to `workers` scoped threads.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break done;
                        }
                        done.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
        for handle in handles {
            for (i, r) in handle.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
        slots
    });
    slots.iter_mut().map(|s| s.take().expect("every slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Flaky {
        failures_left: Mutex<u32>,
        error: BackendError,
    }

    impl Backend for Flaky {
        fn complete(&self, _: &GenerationRequest) -> Result<String, BackendError> {
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(self.error.clone());
            }
            Ok("done".into())
        }
    }

    fn flaky(failures: u32, error: BackendError) -> Arc<dyn Backend> {
        Arc::new(Flaky {
            failures_left: Mutex::new(failures),
            error,
        })
    }

    #[test]
    fn retries_then_succeeds() {
        let gw = Gateway::new(flaky(2, BackendError::Transient("reset".into()))).with_retry(RetryPolicy::no_delay(3));
        let out = gw.generate(&GenerationRequest::new(RoleTag::Evol, "x"), "p").unwrap();
        assert_eq!(out, "done");
        let snap = gw.ledger().snapshot();
        assert_eq!(snap.retries, 2);
        assert_eq!(snap.failures, 0);
        assert_eq!(snap.total_calls(), 1);
    }

    #[test]
    fn exhausts_retry_cap() {
        let gw = Gateway::new(flaky(10, BackendError::RateLimited("429".into()))).with_retry(RetryPolicy::no_delay(3));
        let err = gw.generate(&GenerationRequest::new(RoleTag::Evol, "x"), "p").unwrap_err();
        assert_eq!(
            err,
            GatewayError::Exhausted {
                attempts: 4,
                last: "rate limited: 429".into()
            }
        );
        let snap = gw.ledger().snapshot();
        assert_eq!((snap.retries, snap.failures, snap.total_calls()), (3, 1, 1));
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let gw = Gateway::new(flaky(1, BackendError::Fatal("401 unauthorized".into()))).with_retry(RetryPolicy::no_delay(3));
        let err = gw.generate(&GenerationRequest::new(RoleTag::Optimizer, "x"), "p").unwrap_err();
        assert_eq!(err, GatewayError::Api("401 unauthorized".into()));
        assert_eq!(gw.ledger().snapshot().retries, 0);
    }

    #[test]
    fn invalid_requests_rejected_before_backend() {
        let gw = Gateway::new(flaky(0, BackendError::Transient(String::new())));
        for req in [
            GenerationRequest::new(RoleTag::Evol, ""),
            GenerationRequest::new(RoleTag::Evol, "x").sampling(2.5, 0.9),
            GenerationRequest::new(RoleTag::Evol, "x").sampling(0.5, 0.0),
            GenerationRequest::new(RoleTag::Evol, "x").max_tokens(0),
        ] {
            assert!(matches!(gw.generate(&req, "p"), Err(GatewayError::InvalidRequest(_))));
        }
        assert_eq!(gw.ledger().snapshot().total_calls(), 0);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay_ms: 100,
            max_delay_ms: 1000,
        };
        let delays: Vec<u128> = (0..6).map(|i| p.delay_for(i).as_millis()).collect();
        assert_eq!(delays, [100, 200, 400, 800, 1000, 1000]);
        assert_eq!(p.delay_for(200).as_millis(), 1000);
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u32> = (0..257).collect();
        assert_eq!(parallel_map(&items, 7, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<u32>::new(), 4, |x| *x).is_empty());
    }
}
