//! HTTPS chat-completion client for OpenAI-style and Anthropic-style JSON
//! APIs. Credentials come from environment variables named in the provider
//! config; payload construction and response parsing are pure functions so
//! they are testable without a network.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    apply_effort, ChatProvider, ChatRequest, CompletionResult, EffortDirective, ProviderError,
};
use crate::promptkit::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    /// `POST {base_url}/chat/completions` with bearer auth.
    OpenAiChat,
    /// `POST {base_url}/v1/messages` with x-api-key auth.
    AnthropicMessages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub style: ApiStyle,
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Anthropic requires max_tokens; used when the request does not set one.
    #[serde(default = "default_max_tokens")]
    pub default_max_tokens: u32,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_max_tokens() -> u32 {
    8192
}

pub struct HttpProvider {
    config: HttpProviderConfig,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Self {
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build();
        HttpProvider { config, agent: agent_config.into() }
    }

    fn endpoint(&self) -> String {
        let base = self.config.base_url.trim_end_matches('/');
        match self.config.style {
            ApiStyle::OpenAiChat => format!("{base}/chat/completions"),
            ApiStyle::AnthropicMessages => format!("{base}/v1/messages"),
        }
    }

    fn api_key(&self) -> Result<String, ProviderError> {
        std::env::var(&self.config.api_key_env).map_err(|_| {
            ProviderError::Auth(format!(
                "environment variable {} is not set",
                self.config.api_key_env
            ))
        })
    }
}

/// Build the provider-native JSON payload for a request.
pub(crate) fn build_payload(
    style: ApiStyle,
    request: &ChatRequest,
    default_max_tokens: u32,
) -> Result<Value, ProviderError> {
    let effort = apply_effort(request)?;
    match style {
        ApiStyle::OpenAiChat => {
            let messages: Vec<Value> = request
                .messages
                .iter()
                .map(|m| {
                    json!({
                        "role": match m.role { Role::System => "system", Role::User => "user" },
                        "content": m.text,
                    })
                })
                .collect();
            let mut payload = json!({
                "model": request.model.model_name,
                "messages": messages,
            });
            if let Some(t) = request.temperature {
                payload["temperature"] = json!(t);
            }
            if let Some(s) = request.seed {
                payload["seed"] = json!(s);
            }
            if let Some(m) = request.max_output_tokens {
                payload["max_completion_tokens"] = json!(m);
            }
            match effort {
                EffortDirective::None => {}
                EffortDirective::Categorical(level) => {
                    payload["reasoning_effort"] = json!(level);
                }
                EffortDirective::ThinkingBudget(budget) => {
                    payload["reasoning"] = json!({ "max_tokens": budget });
                }
            }
            Ok(payload)
        }
        ApiStyle::AnthropicMessages => {
            let system: Vec<&str> = request
                .messages
                .iter()
                .filter(|m| m.role == Role::System)
                .map(|m| m.text.as_str())
                .collect();
            let messages: Vec<Value> = request
                .messages
                .iter()
                .filter(|m| m.role == Role::User)
                .map(|m| json!({ "role": "user", "content": m.text }))
                .collect();
            if messages.is_empty() {
                return Err(ProviderError::MalformedPayload(
                    "anthropic-style requests need at least one user message".into(),
                ));
            }
            let mut payload = json!({
                "model": request.model.model_name,
                "max_tokens": request.max_output_tokens.unwrap_or(default_max_tokens),
                "system": system.join("\n\n"),
                "messages": messages,
            });
            if let Some(t) = request.temperature {
                payload["temperature"] = json!(t);
            }
            match effort {
                EffortDirective::None => {}
                EffortDirective::ThinkingBudget(budget) => {
                    payload["thinking"] = json!({ "type": "enabled", "budget_tokens": budget });
                }
                EffortDirective::Categorical(_) => {
                    return Err(ProviderError::UnsupportedEffort {
                        model: request.model.model_name.clone(),
                    });
                }
            }
            Ok(payload)
        }
    }
}

/// Extract content, trace, and token usage from a provider response body.
pub(crate) fn parse_response(
    style: ApiStyle,
    body: &Value,
) -> Result<CompletionResult, ProviderError> {
    let malformed = |what: &str| ProviderError::MalformedPayload(what.to_string());
    match style {
        ApiStyle::OpenAiChat => {
            let message = body
                .pointer("/choices/0/message")
                .ok_or_else(|| malformed("missing choices[0].message"))?;
            let content = message
                .get("content")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("missing message content"))?
                .to_string();
            let reasoning_trace = message
                .get("reasoning_content")
                .or_else(|| message.get("reasoning"))
                .and_then(Value::as_str)
                .map(str::to_string);
            Ok(CompletionResult {
                content,
                reasoning_trace,
                input_tokens: body.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
                output_tokens: body
                    .pointer("/usage/completion_tokens")
                    .and_then(Value::as_u64),
                reasoning_tokens: body
                    .pointer("/usage/completion_tokens_details/reasoning_tokens")
                    .and_then(Value::as_u64),
                latency: Duration::ZERO,
            })
        }
        ApiStyle::AnthropicMessages => {
            let blocks = body
                .get("content")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("missing content blocks"))?;
            let mut content = String::new();
            let mut trace = String::new();
            for block in blocks {
                match block.get("type").and_then(Value::as_str) {
                    Some("text") => {
                        if let Some(text) = block.get("text").and_then(Value::as_str) {
                            content.push_str(text);
                        }
                    }
                    Some("thinking") => {
                        if let Some(text) = block.get("thinking").and_then(Value::as_str) {
                            trace.push_str(text);
                        }
                    }
                    _ => {}
                }
            }
            if content.is_empty() {
                return Err(malformed("no text block in response"));
            }
            Ok(CompletionResult {
                content,
                reasoning_trace: (!trace.is_empty()).then_some(trace),
                input_tokens: body.pointer("/usage/input_tokens").and_then(Value::as_u64),
                output_tokens: body.pointer("/usage/output_tokens").and_then(Value::as_u64),
                reasoning_tokens: None,
                latency: Duration::ZERO,
            })
        }
    }
}

fn map_transport_error(error: ureq::Error) -> ProviderError {
    match error {
        ureq::Error::Timeout(_) => ProviderError::Timeout,
        other => ProviderError::Network(other.to_string()),
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<CompletionResult, ProviderError> {
        let key = self.api_key()?;
        let payload = build_payload(self.config.style, request, self.config.default_max_tokens)?;
        let started = Instant::now();

        let mut builder = self.agent.post(self.endpoint());
        builder = match self.config.style {
            ApiStyle::OpenAiChat => builder.header("authorization", format!("Bearer {key}")),
            ApiStyle::AnthropicMessages => builder
                .header("x-api-key", key)
                .header("anthropic-version", "2023-06-01"),
        };
        let mut response = builder
            .header("content-type", "application/json")
            .send_json(&payload)
            .map_err(map_transport_error)?;

        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(map_transport_error)?;

        match status {
            200..=299 => {}
            401 | 403 => return Err(ProviderError::Auth(text)),
            429 => return Err(ProviderError::RateLimited(text)),
            _ => return Err(ProviderError::Status { status, body: text }),
        }

        let body: Value = serde_json::from_str(&text)
            .map_err(|e| ProviderError::MalformedPayload(e.to_string()))?;
        let mut result = parse_response(self.config.style, &body)?;
        result.latency = started.elapsed();
        Ok(result)
    }
}
