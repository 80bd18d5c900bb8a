//! Reward scoring over HTTP endpoints or the testbed oracle.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backends::{default_retry_limit, default_timeout_ms, Throttle};
use crate::seed;
use crate::testbed::{mock_reward, MockHeader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    HttpScalar,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBackendDescriptor {
    pub kind: RewardKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    /// Standard deviation of the mock's additive reward noise.
    #[serde(default)]
    pub reward_noise: f64,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Reward-model parameters, for FLOPs accounting. Zero for mocks.
    #[serde(default)]
    pub param_count: u64,
}

impl RewardBackendDescriptor {
    pub fn mock(reward_noise: f64) -> Self {
        Self {
            kind: RewardKind::Mock,
            endpoint_url: None,
            reward_noise,
            retry_limit: default_retry_limit(),
            timeout_ms: default_timeout_ms(),
            param_count: 0,
        }
    }

    pub fn http_scalar(endpoint_url: impl Into<String>) -> Self {
        Self {
            kind: RewardKind::HttpScalar,
            endpoint_url: Some(endpoint_url.into()),
            ..Self::mock(0.0)
        }
    }

    pub fn check(&self) -> Result<(), String> {
        match self.kind {
            RewardKind::HttpScalar if self.endpoint_url.as_deref().is_none_or(str::is_empty) => {
                Err("http_scalar reward backends require endpoint_url".into())
            }
            RewardKind::Mock if !self.reward_noise.is_finite() || self.reward_noise < 0.0 => {
                Err("reward_noise must be nonnegative".into())
            }
            _ if self.timeout_ms == 0 => Err("timeout_ms must be positive".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("reward backend unavailable after {attempts} attempt(s): {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("response does not start with a testbed quality header")]
    UnparsableMockSample,
    #[error("cannot score an empty response")]
    EmptyResponse,
    #[error("reward backend returned a non-finite or missing reward: {0}")]
    BadReward(String),
    #[error("invalid reward backend descriptor: {0}")]
    Descriptor(String),
}

pub trait Scorer: Send + Sync {
    fn score(&self, question: &str, response: &str) -> Result<f64, RewardError>;
}

/// Testbed oracle: the latent quality from the header plus optional noise.
///
/// The noise seed is a hash of the `(question, response)` pair, so scoring
/// is stateless.
#[derive(Debug, Clone)]
pub struct MockScorer {
    reward_noise: f64,
}

impl MockScorer {
    pub fn new(reward_noise: f64) -> Self {
        Self { reward_noise }
    }
}

impl Scorer for MockScorer {
    fn score(&self, question: &str, response: &str) -> Result<f64, RewardError> {
        if response.is_empty() {
            return Err(RewardError::EmptyResponse);
        }
        let header = MockHeader::parse_prefix(response).ok_or(RewardError::UnparsableMockSample)?;
        let noise_seed = seed::mix(&[seed::hash_str(question), seed::hash_str(response)]);
        Ok(mock_reward(header.quality, self.reward_noise, noise_seed))
    }
}

/// Scalar reward endpoint: `{"question", "response"}` in, `{"reward"}` out.
pub struct HttpScalarScorer {
    endpoint_url: String,
    retry_limit: u32,
    agent: ureq::Agent,
    throttle: Arc<Throttle>,
}

impl HttpScalarScorer {
    pub fn new(desc: &RewardBackendDescriptor, throttle: Arc<Throttle>) -> Result<Self, RewardError> {
        desc.check().map_err(RewardError::Descriptor)?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(desc.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self {
            endpoint_url: desc.endpoint_url.clone().unwrap_or_default(),
            retry_limit: desc.retry_limit,
            agent,
            throttle,
        })
    }
}

impl Scorer for HttpScalarScorer {
    fn score(&self, question: &str, response: &str) -> Result<f64, RewardError> {
        if response.is_empty() {
            return Err(RewardError::EmptyResponse);
        }
        let body = json!({"question": question, "response": response});
        let attempts = self.retry_limit + 1;
        let mut last_error = String::new();
        for _ in 0..attempts {
            let _permit = self.throttle.acquire();
            let mut resp = match self.agent.post(&self.endpoint_url).send_json(&body) {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            if status != 200 {
                last_error = format!("HTTP {status}");
                if status == 429 || status >= 500 {
                    continue;
                }
                break;
            }
            let payload: serde_json::Value = match resp.body_mut().read_json() {
                Ok(v) => v,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            return payload
                .get("reward")
                .and_then(|v| v.as_f64())
                .filter(|r| r.is_finite())
                .ok_or_else(|| RewardError::BadReward(payload.to_string()));
        }
        Err(RewardError::Unavailable { attempts, last_error })
    }
}

pub fn build_scorer(desc: &RewardBackendDescriptor, throttle: Arc<Throttle>) -> Result<Arc<dyn Scorer>, RewardError> {
    desc.check().map_err(RewardError::Descriptor)?;
    Ok(match desc.kind {
        RewardKind::Mock => Arc::new(MockScorer::new(desc.reward_noise)),
        RewardKind::HttpScalar => Arc::new(HttpScalarScorer::new(desc, throttle)?),
    })
}

/// One-shot scoring through a descriptor.
pub fn score(rb: &RewardBackendDescriptor, question: &str, response: &str) -> Result<f64, RewardError> {
    build_scorer(rb, Throttle::new(1))?.score(question, response)
}
