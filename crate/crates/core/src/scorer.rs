//! Reward-model client for open-ended QA and captioning.
//!
//! The backend is anything implementing [`Scorer`]. Two are provided: a
//! deterministic token-overlap [`MockScorer`] and an [`HttpScorer`] speaking
//! `POST /score` with `{"query","prediction","reference"}` and expecting
//! `{"score": number}` back.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const ENV_URL: &str = "SCORER_URL";
pub const ENV_TIMEOUT_MS: &str = "SCORER_TIMEOUT_MS";
const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub query: String,
    pub prediction: String,
    pub reference: String,
}

impl ScoreRequest {
    pub fn new(query: impl Into<String>, prediction: impl Into<String>, reference: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            prediction: prediction.into(),
            reference: reference.into(),
        }
    }

    fn validate(&self) -> Result<(), ScoreError> {
        for (name, v) in [
            ("query", &self.query),
            ("prediction", &self.prediction),
            ("reference", &self.reference),
        ] {
            if v.trim().is_empty() {
                return Err(ScoreError::InvalidRequest(format!("`{name}` is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("invalid score request: {0}")]
    InvalidRequest(String),
    #[error("scoring unavailable after {attempts} attempt(s): {reason}")]
    Unavailable {
        reason: String,
        attempts: u32,
        /// Transport failures and timeouts are worth retrying; a reply that
        /// parsed but made no sense is not.
        retryable: bool,
    },
}

/// A similarity scorer. Implementations keep no cross-request state.
pub trait Scorer: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, ScoreError>;
}

/// Token-level Jaccard similarity between prediction and reference
/// (whitespace tokens, case-sensitive). The query is ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockScorer;

impl Scorer for MockScorer {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, ScoreError> {
        req.validate()?;
        Ok(ScoreResponse {
            score: jaccard(&req.prediction, &req.reference),
        })
    }
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    let a: BTreeSet<&str> = a.split_whitespace().collect();
    let b: BTreeSet<&str> = b.split_whitespace().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Maps a raw backend score onto [0, 1] by min-max scaling over the
/// configured raw range, then clamping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawRange {
    pub min: f64,
    pub max: f64,
}

impl Default for RawRange {
    fn default() -> Self {
        Self { min: 0.0, max: 1.0 }
    }
}

impl RawRange {
    pub fn normalize(&self, raw: f64) -> f64 {
        ((raw - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct HttpScorerConfig {
    /// Base URL; requests go to `{url}/score`.
    pub url: String,
    pub timeout: Duration,
    pub raw_range: RawRange,
    /// Extra attempts after the first one, for retryable failures only.
    pub retries: u32,
}

impl HttpScorerConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_millis(DEFAULT_TIMEOUT_MS),
            raw_range: RawRange::default(),
            retries: 0,
        }
    }

    /// Reads `SCORER_URL` and `SCORER_TIMEOUT_MS`. Returns `None` when no URL
    /// is set.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(ENV_URL).ok().filter(|u| !u.trim().is_empty())?;
        let timeout_ms = std::env::var(ENV_TIMEOUT_MS)
            .ok()
            .and_then(|v| v.trim().parse::<u64>().ok())
            .unwrap_or(DEFAULT_TIMEOUT_MS);
        Some(Self {
            timeout: Duration::from_millis(timeout_ms),
            ..Self::new(url)
        })
    }
}

pub struct HttpScorer {
    endpoint: String,
    agent: ureq::Agent,
    config: HttpScorerConfig,
}

impl HttpScorer {
    pub fn new(config: HttpScorerConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        let endpoint = format!("{}/score", config.url.trim_end_matches('/'));
        Self {
            endpoint,
            agent,
            config,
        }
    }

    fn attempt(&self, req: &ScoreRequest) -> Result<f64, (String, bool)> {
        let reply = self
            .agent
            .post(&self.endpoint)
            .send_json(req)
            .map_err(|e| match e {
                ureq::Error::Status(code, _) => (format!("backend returned HTTP {code}"), code >= 500),
                ureq::Error::Transport(t) => (t.to_string(), true),
            })?;
        let body: ScoreResponse = reply
            .into_json()
            .map_err(|e| (format!("malformed backend reply: {e}"), false))?;
        if !body.score.is_finite() {
            return Err(("backend returned a non-finite score".into(), false));
        }
        Ok(body.score)
    }
}

impl Scorer for HttpScorer {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, ScoreError> {
        req.validate()?;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(req) {
                Ok(raw) => {
                    return Ok(ScoreResponse {
                        score: self.config.raw_range.normalize(raw),
                    })
                }
                Err((reason, retryable)) => {
                    if !retryable || attempts > self.config.retries {
                        return Err(ScoreError::Unavailable {
                            reason,
                            attempts,
                            retryable,
                        });
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock(pred: &str, reference: &str) -> f64 {
        MockScorer
            .score(&ScoreRequest::new("q", pred, reference))
            .unwrap()
            .score
    }

    #[test]
    fn mock_identity_disjoint_partial() {
        assert_eq!(mock("a cat on a mat", "a cat on a mat"), 1.0);
        assert_eq!(mock("x y", "a b"), 0.0);
        assert_eq!(mock("a b", "a b c d"), 0.5);
    }

    #[test]
    fn mock_is_deterministic_and_bounded() {
        let req = ScoreRequest::new("q", "the quick brown fox", "a quick red fox jumps");
        let first = MockScorer.score(&req).unwrap();
        for _ in 0..10 {
            assert_eq!(MockScorer.score(&req).unwrap(), first);
        }
        assert!((0.0..=1.0).contains(&first.score));
    }

    #[test]
    fn empty_fields_rejected() {
        let err = MockScorer.score(&ScoreRequest::new("", "a", "b")).unwrap_err();
        assert!(matches!(err, ScoreError::InvalidRequest(_)));
    }

    #[test]
    fn raw_range_clamps() {
        let r = RawRange { min: -10.0, max: 10.0 };
        assert_eq!(r.normalize(0.0), 0.5);
        assert_eq!(r.normalize(25.0), 1.0);
        assert_eq!(r.normalize(-11.0), 0.0);
    }
}
