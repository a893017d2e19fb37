//! Uniform chat-completion abstraction: real HTTP APIs, a deterministic
//! scripted mock, and a synthetic calibrated agent.
//!
//! Every backend implements [`ChatProvider`]. Requests carry a stable
//! fingerprint (hash of all fields) used for mock fixtures, per-request
//! randomness derivation, and run-record bookkeeping. Provider clients are
//! safe for concurrent use; results are immutable once returned.

mod http;
mod judge;
mod mock;
mod retry;
mod synthetic;

pub use http::{ApiStyle, HttpProvider, HttpProviderConfig};
pub use judge::JudgeClient;
pub use mock::{MockFixture, MockProvider};
pub use retry::{complete_with_retry, InflightLimiter, RetryPolicy};
pub use synthetic::{AccuracySpec, ConfidencePolicy, SyntheticAgent, SyntheticAgentParams};

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::promptkit::MessageSequence;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Network(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider payload: {0}")]
    MalformedPayload(String),
    #[error("model {model} does not support a reasoning effort")]
    UnsupportedEffort { model: String },
    #[error("invalid model spec: {0}")]
    InvalidModelSpec(String),
    #[error("invalid synthetic agent params: {0}")]
    InvalidAgentParams(String),
    #[error("no fixture for fingerprint {0} and no fallback generator")]
    MissingFixture(String),
    #[error("fixture file error: {0}")]
    FixtureFile(String),
}

impl ProviderError {
    /// Transient errors are worth retrying; auth failures and malformed
    /// requests are not.
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderError::RateLimited(_) | ProviderError::Timeout | ProviderError::Network(_) => {
                true
            }
            ProviderError::Status { status, .. } => *status == 429 || (500..=599).contains(status),
            _ => false,
        }
    }
}

/// Requested reasoning depth. `Unspecified` sends no effort/budget fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningEffort {
    Unspecified,
    Low,
    Medium,
    High,
}

impl ReasoningEffort {
    pub fn key(&self) -> &'static str {
        match self {
            ReasoningEffort::Unspecified => "unspecified",
            ReasoningEffort::Low => "low",
            ReasoningEffort::Medium => "medium",
            ReasoningEffort::High => "high",
        }
    }
}

/// How a model accepts reasoning-depth control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffortStyle {
    /// A low/medium/high field in the request.
    Categorical,
    /// An explicit thinking-token budget mapped from the effort level.
    TokenBudget,
    None,
}

/// Thinking-token budgets per effort level. The defaults are this harness's
/// own estimates and are config-overridable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetMap {
    pub low: u32,
    pub medium: u32,
    pub high: u32,
}

impl Default for BudgetMap {
    fn default() -> Self {
        BudgetMap { low: 1024, medium: 8192, high: 32768 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub provider_id: String,
    pub model_name: String,
    pub effort_style: EffortStyle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_map: Option<BudgetMap>,
    pub exposes_trace: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ProviderError> {
        match (self.effort_style, &self.budget_map) {
            (EffortStyle::TokenBudget, Some(map)) => {
                if !(map.low < map.medium && map.medium < map.high) {
                    return Err(ProviderError::InvalidModelSpec(format!(
                        "budgets must strictly increase low < medium < high, got {} / {} / {}",
                        map.low, map.medium, map.high
                    )));
                }
            }
            (EffortStyle::TokenBudget, None) => {
                return Err(ProviderError::InvalidModelSpec(
                    "token_budget effort style requires a budget_map".into(),
                ));
            }
            (_, Some(_)) => {
                return Err(ProviderError::InvalidModelSpec(
                    "budget_map is only valid with the token_budget effort style".into(),
                ));
            }
            (_, None) => {}
        }
        Ok(())
    }
}

/// A fully specified chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: ModelSpec,
    pub messages: MessageSequence,
    pub effort: ReasoningEffort,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
}

impl ChatRequest {
    /// Stable hash of every request field. Equal requests hash equally; any
    /// field change produces a different fingerprint.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("requests serialize");
        let digest = Sha256::digest(&canonical);
        hex::encode(digest)
    }
}

/// One completed chat response.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub content: String,
    /// Present only when the provider exposes the trace (or the model echoed
    /// one into a dedicated field).
    pub reasoning_trace: Option<String>,
    pub input_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
    pub reasoning_tokens: Option<u64>,
    pub latency: Duration,
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<CompletionResult, ProviderError>;
}

/// Provider-native representation of a reasoning-effort request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffortDirective {
    /// Emit nothing.
    None,
    /// Emit the provider's categorical field value.
    Categorical(&'static str),
    /// Emit a thinking-token budget.
    ThinkingBudget(u32),
}

/// Map the requested effort onto the model's native control fields.
pub fn apply_effort(request: &ChatRequest) -> Result<EffortDirective, ProviderError> {
    if request.effort == ReasoningEffort::Unspecified {
        return Ok(EffortDirective::None);
    }
    match request.model.effort_style {
        EffortStyle::None => Err(ProviderError::UnsupportedEffort {
            model: request.model.model_name.clone(),
        }),
        EffortStyle::Categorical => Ok(EffortDirective::Categorical(match request.effort {
            ReasoningEffort::Low => "low",
            ReasoningEffort::Medium => "medium",
            ReasoningEffort::High => "high",
            ReasoningEffort::Unspecified => unreachable!(),
        })),
        EffortStyle::TokenBudget => {
            let map = request.model.budget_map.unwrap_or_default();
            let budget = match request.effort {
                ReasoningEffort::Low => map.low,
                ReasoningEffort::Medium => map.medium,
                ReasoningEffort::High => map.high,
                ReasoningEffort::Unspecified => unreachable!(),
            };
            Ok(EffortDirective::ThinkingBudget(budget))
        }
    }
}
