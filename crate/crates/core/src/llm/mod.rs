//! Provider-agnostic text generation.
//!
//! [`LlmClient`] wraps a [`TextGenerator`] with request validation, retries
//! with exponential backoff, and bounded-parallel batch generation. The
//! [`MockGenerator`] gives deterministic completions so every stage of the
//! pipeline runs without network access.

mod http;
mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::http::{HttpGenerator, HttpGeneratorConfig};
pub use self::mock::{MockBehavior, MockFailure, MockGenerator};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;
pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("provider error{}: {detail}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider { status: Option<u16>, detail: String },
    #[error("request timed out")]
    Timeout,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    /// Transport failures, timeouts, throttling and 5xx are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Timeout => true,
            LlmError::Provider { status: None, .. } => true,
            LlmError::Provider {
                status: Some(s), ..
            } => *s == 429 || *s >= 500,
            LlmError::Auth(_) | LlmError::InvalidRequest(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Only the mock provider honors this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, temperature: f64) -> Self {
        Self {
            prompt: prompt.into(),
            temperature,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    /// May be empty if the provider returned nothing.
    pub text: String,
    pub provider_id: String,
    pub latency_ms: u64,
}

/// A backend that produces one completion per call.
pub trait TextGenerator: Send + Sync {
    fn provider_id(&self) -> String;
    fn complete(&self, req: &GenerationRequest) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: DEFAULT_MAX_RETRIES,
            initial_backoff_ms: 500,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_backoff(max_retries: u32) -> Self {
        Self {
            max_retries,
            initial_backoff_ms: 0,
            max_backoff_ms: 0,
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(
            self.initial_backoff_ms
                .saturating_mul(factor)
                .min(self.max_backoff_ms),
        )
    }
}

/// Failed requests from [`LlmClient::generate_many`], by request index.
#[derive(Debug, Error)]
#[error("{} of {total} requests failed (indices {indices:?})", failures.len(), indices = failures.iter().map(|(i, _)| *i).collect::<Vec<_>>())]
pub struct BatchError {
    pub total: usize,
    pub failures: Vec<(usize, LlmError)>,
    /// Successful responses, `None` where the request failed.
    pub responses: Vec<Option<GenerationResponse>>,
}

#[derive(Clone)]
pub struct LlmClient {
    generator: Arc<dyn TextGenerator>,
    retry: RetryPolicy,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("provider", &self.generator.provider_id())
            .field("retry", &self.retry)
            .finish()
    }
}

impl LlmClient {
    pub fn new(generator: Arc<dyn TextGenerator>, retry: RetryPolicy) -> Self {
        Self { generator, retry }
    }

    pub fn mock(behavior: MockBehavior) -> Self {
        Self::new(
            Arc::new(MockGenerator::new(behavior)),
            RetryPolicy::no_backoff(DEFAULT_MAX_RETRIES),
        )
    }

    pub fn provider_id(&self) -> String {
        self.generator.provider_id()
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        req.validate()?;
        let start = Instant::now();
        let mut attempt = 0;
        loop {
            match self.generator.complete(req) {
                Ok(text) => {
                    return Ok(GenerationResponse {
                        text,
                        provider_id: self.generator.provider_id(),
                        latency_ms: start.elapsed().as_millis() as u64,
                    })
                }
                Err(e) if e.is_transient() && attempt < self.retry.max_retries => {
                    log::debug!("transient failure (attempt {}): {e}", attempt + 1);
                    std::thread::sleep(self.retry.backoff(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Runs every request with at most `parallelism` in flight; results are
    /// in request order.
    pub fn generate_all(
        &self,
        reqs: &[GenerationRequest],
        parallelism: usize,
    ) -> Vec<Result<GenerationResponse, LlmError>> {
        let workers = parallelism.max(1).min(reqs.len());
        if workers <= 1 {
            return reqs.iter().map(|r| self.generate(r)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<GenerationResponse, LlmError>>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= reqs.len() {
                        break;
                    }
                    let result = self.generate(&reqs[i]);
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }

    pub fn generate_many(
        &self,
        reqs: &[GenerationRequest],
        parallelism: usize,
    ) -> Result<Vec<GenerationResponse>, BatchError> {
        let results = self.generate_all(reqs, parallelism);
        let mut failures = Vec::new();
        let mut responses = Vec::with_capacity(results.len());
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(resp) => responses.push(Some(resp)),
                Err(e) => {
                    failures.push((i, e));
                    responses.push(None);
                }
            }
        }
        if failures.is_empty() {
            Ok(responses.into_iter().map(|r| r.expect("no failures")).collect())
        } else {
            Err(BatchError {
                total: reqs.len(),
                failures,
                responses,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{fill, QUERY_GENERATION_TEMPLATE, TOOL_DOCUMENT_SLOT};

    /// Fails the first `fail_times` calls with `error`, then echoes the prompt.
    struct Flaky {
        fail_times: usize,
        error: LlmError,
        calls: AtomicUsize,
    }

    impl TextGenerator for Flaky {
        fn provider_id(&self) -> String {
            "flaky".into()
        }
        fn complete(&self, req: &GenerationRequest) -> Result<String, LlmError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_times {
                Err(self.error.clone())
            } else {
                Ok(req.prompt.clone())
            }
        }
    }

    fn flaky(fail_times: usize, error: LlmError) -> (Arc<Flaky>, LlmClient) {
        let g = Arc::new(Flaky {
            fail_times,
            error,
            calls: AtomicUsize::new(0),
        });
        (g.clone(), LlmClient::new(g, RetryPolicy::no_backoff(3)))
    }

    #[test]
    fn mock_is_deterministic_per_seed() {
        let client = LlmClient::mock(MockBehavior::QueryFromDocument { terms: 6 });
        let prompt = fill(
            QUERY_GENERATION_TEMPLATE,
            TOOL_DOCUMENT_SLOT,
            "name: flights\ndescription: search flight tickets by date and city",
        );
        let req = GenerationRequest::new(prompt, 0.7).with_seed(7);
        let a = client.generate(&req).unwrap();
        let b = client.generate(&req).unwrap();
        assert_eq!(a.text.as_bytes(), b.text.as_bytes());
        assert_eq!(a.provider_id, "mock");
    }

    #[test]
    fn transient_errors_are_retried() {
        let (g, client) = flaky(2, LlmError::Provider { status: Some(503), detail: "busy".into() });
        let resp = client.generate(&GenerationRequest::new("p", 0.0)).unwrap();
        assert_eq!(resp.text, "p");
        assert_eq!(g.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_are_bounded() {
        let (g, client) = flaky(10, LlmError::Timeout);
        let err = client.generate(&GenerationRequest::new("p", 0.0)).unwrap_err();
        assert_eq!(err, LlmError::Timeout);
        assert_eq!(g.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn auth_errors_are_not_retried() {
        let (g, client) = flaky(10, LlmError::Auth("bad key".into()));
        let err = client.generate(&GenerationRequest::new("p", 0.0)).unwrap_err();
        assert!(matches!(err, LlmError::Auth(_)));
        assert_eq!(g.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (g, client) = flaky(10, LlmError::Provider { status: Some(400), detail: "bad".into() });
        assert!(client.generate(&GenerationRequest::new("p", 0.0)).is_err());
        assert_eq!(g.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn temperature_out_of_range_rejected() {
        let client = LlmClient::mock(MockBehavior::Echo);
        let err = client.generate(&GenerationRequest::new("p", 2.5)).unwrap_err();
        assert!(matches!(err, LlmError::InvalidRequest(_)));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            initial_backoff_ms: 100,
            max_backoff_ms: 350,
        };
        assert_eq!(p.backoff(0), Duration::from_millis(100));
        assert_eq!(p.backoff(1), Duration::from_millis(200));
        assert_eq!(p.backoff(2), Duration::from_millis(350));
        assert_eq!(p.backoff(70), Duration::from_millis(350));
    }

    #[test]
    fn generate_many_preserves_order() {
        let client = LlmClient::mock(MockBehavior::Echo);
        let reqs: Vec<_> = (0..10)
            .map(|i| GenerationRequest::new(format!("prompt {i}"), 0.0))
            .collect();
        let out = client.generate_many(&reqs, 4).unwrap();
        assert_eq!(out.len(), 10);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.text, format!("prompt {i}"));
        }
    }

    #[test]
    fn generate_many_reports_failed_indices() {
        let client = LlmClient::new(
            Arc::new(MockGenerator::new(MockBehavior::Echo).failing(MockFailure::WhenPromptContains(
                "boom".into(),
            ))),
            RetryPolicy::no_backoff(1),
        );
        let reqs = vec![
            GenerationRequest::new("ok 0", 0.0),
            GenerationRequest::new("boom 1", 0.0),
            GenerationRequest::new("ok 2", 0.0),
        ];
        let err = client.generate_many(&reqs, 2).unwrap_err();
        assert_eq!(err.failures.len(), 1);
        assert_eq!(err.failures[0].0, 1);
        assert_eq!(err.responses[0].as_ref().unwrap().text, "ok 0");
        assert!(err.responses[1].is_none());
        assert_eq!(err.responses[2].as_ref().unwrap().text, "ok 2");
    }

    #[test]
    fn generate_many_empty() {
        let client = LlmClient::mock(MockBehavior::Echo);
        assert!(client.generate_many(&[], 4).unwrap().is_empty());
    }
}
