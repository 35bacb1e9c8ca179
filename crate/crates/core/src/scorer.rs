//! Reward scorers used to re-rank candidate responses.
//!
//! [`MockScorer`] hashes the (prompt, response) pair into `[0, 1]`.
//! [`RemoteScorer`] posts `{"prompt", "response"}` to `<endpoint>/score` and
//! expects `{"score": number}` back.

use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable holding the scorer endpoint.
pub const SCORER_URL_ENV: &str = "DIVKIT_SCORER_URL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub response: String,
}

impl ScoreRequest {
    pub fn new(prompt: impl Into<String>, response: impl Into<String>) -> Result<Self, ScoreError> {
        let request = Self {
            prompt: prompt.into(),
            response: response.into(),
        };
        if request.prompt.is_empty() || request.response.is_empty() {
            return Err(ScoreError::InvalidRequest(
                "prompt and response must be non-empty".into(),
            ));
        }
        Ok(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("invalid score request: {0}")]
    InvalidRequest(String),
    #[error("scorer transport failed after {attempts} attempt(s): {message}")]
    Transport {
        attempts: u32,
        /// Whether the last failure was of a kind that is normally retried.
        retryable: bool,
        status: Option<u16>,
        message: String,
    },
    #[error("batch item {index} failed: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<ScoreError>,
    },
}

impl ScoreError {
    /// Attempts made before giving up, when the error came from transport.
    pub fn attempts(&self) -> Option<u32> {
        match self {
            ScoreError::Transport { attempts, .. } => Some(*attempts),
            ScoreError::Batch { source, .. } => source.attempts(),
            ScoreError::InvalidRequest(_) => None,
        }
    }
}

#[async_trait]
pub trait Scorer: Send + Sync {
    async fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ScoreError>;
}

/// Deterministic stand-in for a reward model.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockScorer;

impl MockScorer {
    pub fn score_pair(prompt: &str, response: &str) -> f64 {
        let mut hasher = Sha256::new();
        // Length prefixes keep ("ab", "c") and ("a", "bc") apart.
        hasher.update((prompt.len() as u64).to_le_bytes());
        hasher.update(prompt.as_bytes());
        hasher.update((response.len() as u64).to_le_bytes());
        hasher.update(response.as_bytes());
        let digest = hasher.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        // 53 high bits give an exactly representable value in [0, 1].
        (u64::from_be_bytes(head) >> 11) as f64 / ((1u64 << 53) - 1) as f64
    }
}

#[async_trait]
impl Scorer for MockScorer {
    async fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ScoreError> {
        Ok(ScoreResponse {
            score: Self::score_pair(&request.prompt, &request.response),
            latency_ms: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(100),
            multiplier: 2,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff * self.multiplier.saturating_pow(retry.saturating_sub(1))
    }
}

#[derive(Deserialize)]
struct ScoreBody {
    score: f64,
}

/// HTTP client for a reward-model scoring service.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    client: reqwest::Client,
    url: String,
    retry: RetryPolicy,
}

impl RemoteScorer {
    pub fn new(endpoint: &str) -> Result<Self, ScoreError> {
        Self::with_policy(endpoint, RetryPolicy::default(), Duration::from_secs(30))
    }

    pub fn with_policy(
        endpoint: &str,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self, ScoreError> {
        if retry.max_attempts < 1 {
            return Err(ScoreError::InvalidRequest(
                "retry policy needs at least one attempt".into(),
            ));
        }
        let endpoint = endpoint.trim_end_matches('/');
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(ScoreError::InvalidRequest(format!(
                "scorer endpoint must be an http(s) URL, got {endpoint:?}"
            )));
        }
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ScoreError::InvalidRequest(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{endpoint}/score"),
            retry,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    async fn attempt(&self, request: &ScoreRequest) -> Result<f64, Failure> {
        let resp = self
            .client
            .post(&self.url)
            .json(request)
            .send()
            .await
            .map_err(|e| Failure {
                retryable: true,
                status: None,
                message: e.to_string(),
            })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Failure {
                retryable: status.is_server_error() || status.as_u16() == 429,
                status: Some(status.as_u16()),
                message: format!("HTTP {status}"),
            });
        }
        let bytes = resp.bytes().await.map_err(|e| Failure {
            retryable: true,
            status: Some(status.as_u16()),
            message: e.to_string(),
        })?;
        let body: ScoreBody = serde_json::from_slice(&bytes).map_err(|e| Failure {
            retryable: false,
            status: Some(status.as_u16()),
            message: format!("malformed score body: {e}"),
        })?;
        if !body.score.is_finite() {
            return Err(Failure {
                retryable: false,
                status: Some(status.as_u16()),
                message: "score is not finite".into(),
            });
        }
        Ok(body.score)
    }
}

struct Failure {
    retryable: bool,
    status: Option<u16>,
    message: String,
}

#[async_trait]
impl Scorer for RemoteScorer {
    async fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ScoreError> {
        let start = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request).await {
                Ok(score) => {
                    return Ok(ScoreResponse {
                        score,
                        latency_ms: start.elapsed().as_millis() as u64,
                    })
                }
                Err(f) if f.retryable && attempts < self.retry.max_attempts => {
                    tokio::time::sleep(self.retry.backoff(attempts)).await;
                }
                Err(f) => {
                    return Err(ScoreError::Transport {
                        attempts,
                        retryable: f.retryable,
                        status: f.status,
                        message: f.message,
                    })
                }
            }
        }
    }
}

/// Scores `requests` with at most `max_in_flight` outstanding calls.
///
/// Responses come back in request order. The first failing index (in request
/// order) fails the whole batch; outstanding calls are dropped.
pub async fn score_batch(
    scorer: &dyn Scorer,
    requests: &[ScoreRequest],
    max_in_flight: usize,
) -> Result<Vec<ScoreResponse>, ScoreError> {
    if max_in_flight < 1 {
        return Err(ScoreError::InvalidRequest(
            "max_in_flight must be at least 1".into(),
        ));
    }
    stream::iter(requests.iter().enumerate())
        .map(|(index, request)| async move {
            scorer
                .score(request)
                .await
                .map_err(|source| ScoreError::Batch {
                    index,
                    source: Box::new(source),
                })
        })
        .buffered(max_in_flight)
        .try_collect()
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_is_deterministic_and_bounded() {
        let a = MockScorer::score_pair("hello", "world");
        assert_eq!(a.to_bits(), MockScorer::score_pair("hello", "world").to_bits());
        assert!((0.0..=1.0).contains(&a));
        assert_ne!(a, MockScorer::score_pair("hell", "oworld"));
    }

    #[test]
    fn request_validation() {
        assert!(ScoreRequest::new("", "x").is_err());
        assert!(ScoreRequest::new("x", "").is_err());
        assert!(ScoreRequest::new("x", "y").is_ok());
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(3), Duration::from_millis(400));
    }

    #[test]
    fn endpoint_validation() {
        assert!(RemoteScorer::new("localhost:8080").is_err());
        let s = RemoteScorer::new("http://localhost:8080/").unwrap();
        assert_eq!(s.url(), "http://localhost:8080/score");
    }

    #[tokio::test]
    async fn batch_preserves_order() {
        let requests: Vec<ScoreRequest> = (0..10)
            .map(|i| ScoreRequest::new(format!("p{i}"), "r").unwrap())
            .collect();
        let out = score_batch(&MockScorer, &requests, 4).await.unwrap();
        assert_eq!(out.len(), 10);
        for (req, resp) in requests.iter().zip(&out) {
            assert_eq!(resp.score, MockScorer::score_pair(&req.prompt, &req.response));
        }
        assert!(score_batch(&MockScorer, &[], 4).await.unwrap().is_empty());
        assert!(score_batch(&MockScorer, &requests, 0).await.is_err());
    }
}
