//! Chat backends: an OpenAI-compatible HTTP client and a scripted mock that
//! replays fixture replies and records every request it receives.

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, Role, SimulateError};
use crate::net::{http_client, post_json, token_from_env, with_retries, Backoff, RateLimiter, TransportError};

/// Wire body of a chat completion request. Deliberately carries no decoding
/// parameters: temperature, top-p and friends stay at provider defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ChatResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

pub trait ChatBackend: Send + Sync {
    /// One attempt; retries and rate limiting are the caller's business.
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl HttpChatBackend {
    pub fn new(base_url: &str, token: Option<String>, timeout: Duration) -> Result<Self, TransportError> {
        let trimmed = base_url.trim_end_matches('/');
        let url = if trimmed.ends_with("/chat/completions") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/chat/completions")
        };
        Ok(HttpChatBackend { client: http_client(timeout)?, url, token })
    }
}

impl ChatBackend for HttpChatBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let resp: ChatResponse = post_json(&self.client, &self.url, self.token.as_deref(), request)?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::Decode { url: self.url.clone(), message: "response has no message content".into() })
    }
}

/// Which side of the conversation a mock script rule answers for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockRole {
    Assistant,
    Simuser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchScope {
    /// The system message, if any.
    System,
    /// The final message of the request.
    Last,
    /// Every non-system message.
    History,
    /// Every message.
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockCondition {
    pub scope: MatchScope,
    /// Holds when any of these substrings occurs in the scoped text.
    pub any: Vec<String>,
}

/// One line of a mock script file. A rule fires when every condition holds;
/// the first firing rule for the backend's role answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub role: MockRole,
    #[serde(default)]
    pub when: Vec<MockCondition>,
    pub replies: Vec<String>,
}

impl MockRule {
    fn matches(&self, messages: &[ChatMessage]) -> bool {
        self.when.iter().all(|cond| {
            let texts: Vec<&str> = match cond.scope {
                MatchScope::System => messages.iter().filter(|m| m.role == Role::System).map(|m| m.content.as_str()).collect(),
                MatchScope::Last => messages.last().map(|m| m.content.as_str()).into_iter().collect(),
                MatchScope::History => messages.iter().filter(|m| m.role != Role::System).map(|m| m.content.as_str()).collect(),
                MatchScope::Any => messages.iter().map(|m| m.content.as_str()).collect(),
            };
            cond.any.iter().any(|needle| texts.iter().any(|t| t.contains(needle.as_str())))
        })
    }
}

pub fn parse_mock_script(text: &str) -> Result<Vec<MockRule>, SimulateError> {
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rule: MockRule = serde_json::from_str(line)
            .map_err(|e| SimulateError::MockScript(format!("line {}: {e}", i + 1)))?;
        if rule.replies.is_empty() {
            return Err(SimulateError::MockScript(format!("line {}: rule has no replies", i + 1)));
        }
        rules.push(rule);
    }
    Ok(rules)
}

pub fn load_mock_script(path: &Path) -> Result<Vec<MockRule>, SimulateError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimulateError::MockScript(format!("{}: {e}", path.display())))?;
    parse_mock_script(&text)
}

/// Stateless scripted backend. The reply index is the number of user-role
/// messages in the request minus one, clamped to the rule's last reply, so
/// the same request always gets the same answer regardless of scheduling.
#[derive(Debug)]
pub struct MockChatBackend {
    role: MockRole,
    rules: Vec<MockRule>,
    captured: Mutex<Vec<ChatRequest>>,
}

impl MockChatBackend {
    pub fn new(role: MockRole, rules: Vec<MockRule>) -> Self {
        let rules = rules.into_iter().filter(|r| r.role == role).collect();
        MockChatBackend { role, rules, captured: Mutex::new(Vec::new()) }
    }

    pub fn captured(&self) -> Vec<ChatRequest> {
        self.captured.lock().expect("capture lock").clone()
    }

    pub fn role(&self) -> MockRole {
        self.role
    }
}

impl ChatBackend for MockChatBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        self.captured.lock().expect("capture lock").push(request.clone());
        let rule = self.rules.iter().find(|r| r.matches(&request.messages)).ok_or_else(|| TransportError::Decode {
            url: "mock".into(),
            message: format!("no {:?} rule matches the request", self.role),
        })?;
        let users = request.messages.iter().filter(|m| m.role == Role::User).count();
        let idx = users.saturating_sub(1).min(rule.replies.len() - 1);
        Ok(rule.replies[idx].clone())
    }
}

/// Connection settings for one chat model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmEndpoint {
    /// `https://…` for a live endpoint, or `mock:<script.jsonl>` for a scripted one.
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
    #[serde(default = "default_rate")]
    pub rate_limit_per_minute: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_backoff_cap_ms() -> u64 {
    30_000
}
fn default_rate() -> f64 {
    60.0
}
fn default_timeout() -> f64 {
    60.0
}

impl LlmEndpoint {
    pub fn mock(script: &Path, model_name: &str) -> Self {
        LlmEndpoint {
            base_url: format!("mock:{}", script.display()),
            model_name: model_name.to_string(),
            auth_env_var: None,
            max_retries: 0,
            backoff_base_ms: 0,
            backoff_cap_ms: 0,
            rate_limit_per_minute: 600_000.0,
            timeout_secs: 1.0,
        }
    }

    pub fn mock_script(&self) -> Option<&Path> {
        self.base_url.strip_prefix("mock:").map(Path::new)
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        if self.rate_limit_per_minute.is_nan() || self.rate_limit_per_minute <= 0.0 {
            return Err(SimulateError::Config(format!("{}: rate limit must be positive", self.model_name)));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(SimulateError::Config(format!("{}: timeout must be positive", self.model_name)));
        }
        if self.model_name.is_empty() {
            return Err(SimulateError::Config("endpoint model_name is empty".into()));
        }
        Ok(())
    }

    pub fn backoff(&self) -> Backoff {
        Backoff {
            max_retries: self.max_retries,
            base: Duration::from_millis(self.backoff_base_ms),
            cap: Duration::from_millis(self.backoff_cap_ms),
        }
    }

    /// Build a client; mock endpoints answer for `role`.
    pub fn connect(&self, role: MockRole) -> Result<ChatClient, SimulateError> {
        self.validate()?;
        let backend: Arc<dyn ChatBackend> = match self.mock_script() {
            Some(script) => Arc::new(MockChatBackend::new(role, load_mock_script(script)?)),
            None => {
                let token = match &self.auth_env_var {
                    Some(var) => Some(token_from_env(var).ok_or_else(|| {
                        SimulateError::Config(format!("environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                Arc::new(HttpChatBackend::new(&self.base_url, token, Duration::from_secs_f64(self.timeout_secs))?)
            }
        };
        Ok(ChatClient::new(backend, &self.model_name, self.backoff(), self.rate_limit_per_minute))
    }
}

/// A backend plus its retry policy and rate limiter. One client per endpoint,
/// shared by every conversation that talks to it.
pub struct ChatClient {
    backend: Arc<dyn ChatBackend>,
    model: String,
    backoff: Backoff,
    limiter: RateLimiter,
}

impl std::fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatClient").field("model", &self.model).finish()
    }
}

impl ChatClient {
    pub fn new(backend: Arc<dyn ChatBackend>, model: &str, backoff: Backoff, rate_limit_per_minute: f64) -> Self {
        ChatClient {
            backend,
            model: model.to_string(),
            backoff,
            limiter: RateLimiter::per_minute(rate_limit_per_minute),
        }
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn complete(&self, messages: Vec<ChatMessage>) -> Result<String, TransportError> {
        let request = ChatRequest { model: self.model.clone(), messages };
        with_retries(&self.backoff, || {
            self.limiter.acquire();
            self.backend.send(&request)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(role: Role, content: &str) -> ChatMessage {
        ChatMessage { role, content: content.into() }
    }

    const SCRIPT: &str = r#"
{"role":"assistant","when":[{"scope":"system","any":["DelusionScore"]}],"replies":["careful 1","careful 2"]}
{"role":"assistant","replies":["sure 1","sure 2","sure 3"]}
{"role":"simuser","when":[{"scope":"last","any":["careful"]}],"replies":["calmer"]}
"#;

    #[test]
    fn first_matching_rule_and_index() {
        let mock = MockChatBackend::new(MockRole::Assistant, parse_mock_script(SCRIPT).unwrap());
        let req = |msgs| ChatRequest { model: "m".into(), messages: msgs };
        let one = vec![msg(Role::User, "hi")];
        assert_eq!(mock.send(&req(one.clone())).unwrap(), "sure 1");
        let mut scored = vec![msg(Role::System, "DelusionScore is 0.40")];
        scored.extend(one.clone());
        assert_eq!(mock.send(&req(scored)).unwrap(), "careful 1");
        let long: Vec<ChatMessage> = (0..9).map(|i| msg(if i % 2 == 0 { Role::User } else { Role::Assistant }, "x")).collect();
        assert_eq!(mock.send(&req(long)).unwrap(), "sure 3");
        assert_eq!(mock.captured().len(), 3);
    }

    #[test]
    fn unmatched_request_fails_without_retry() {
        let mock = MockChatBackend::new(MockRole::Simuser, parse_mock_script(SCRIPT).unwrap());
        let err = mock.send(&ChatRequest { model: "m".into(), messages: vec![msg(Role::User, "plain")] }).unwrap_err();
        assert!(!err.is_retryable());
    }

    #[test]
    fn request_body_has_only_model_and_messages() {
        let body = serde_json::to_value(ChatRequest { model: "m".into(), messages: vec![msg(Role::User, "x")] }).unwrap();
        let keys: Vec<&String> = body.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["messages", "model"]);
        assert_eq!(body["messages"][0]["role"], "user");
    }

    #[test]
    fn bad_script_lines_are_reported() {
        assert!(matches!(parse_mock_script("{\"role\":\"assistant\",\"replies\":[]}"), Err(SimulateError::MockScript(_))));
        assert!(matches!(parse_mock_script("nope"), Err(SimulateError::MockScript(m)) if m.starts_with("line 1")));
    }

    #[test]
    fn endpoint_urls() {
        let b = HttpChatBackend::new("http://localhost:9/v1/", None, Duration::from_secs(1)).unwrap();
        assert_eq!(b.url, "http://localhost:9/v1/chat/completions");
        let ep = LlmEndpoint::mock(Path::new("/tmp/s.jsonl"), "mock-a");
        assert_eq!(ep.mock_script(), Some(Path::new("/tmp/s.jsonl")));
        let mut bad = ep.clone();
        bad.rate_limit_per_minute = 0.0;
        assert!(bad.validate().is_err());
    }
}
