//! Chat-completion providers: a uniform `complete` contract over real
//! OpenAI-compatible HTTP endpoints and deterministic scripted providers for
//! offline tests, with retry, timeout, and token accounting.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FinishReason, UsageMeter};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("all {attempts} attempts failed; last error: {last_error}")]
    Transport { attempts: u32, last_error: String },
    #[error("scripted response queue is empty and no pattern matched")]
    ScriptExhausted,
    #[error("endpoint refused the request with status {status}: {message}")]
    Refusal { status: u16, message: String },
    #[error("endpoint returned a malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// One chat-completion request. The system message, when present, must be
/// the first and only one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl ChatRequest {
    pub fn new(
        model: impl Into<String>,
        messages: Vec<ChatMessage>,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<Self, ProviderError> {
        if messages.is_empty() {
            return Err(ProviderError::InvalidRequest("messages are empty".into()));
        }
        for (i, m) in messages.iter().enumerate() {
            if m.role == Role::System && i != 0 {
                return Err(ProviderError::InvalidRequest(
                    "system message must be first".into(),
                ));
            }
        }
        Ok(Self {
            messages,
            temperature,
            max_tokens,
            model: model.into(),
        })
    }

    /// System + user pair; the system slot is skipped when `system` is None.
    pub fn chat(
        model: &str,
        system: Option<&str>,
        user: &str,
        temperature: f64,
        max_tokens: u32,
    ) -> Self {
        let mut messages = Vec::new();
        if let Some(s) = system {
            messages.push(ChatMessage {
                role: Role::System,
                content: s.to_string(),
            });
        }
        messages.push(ChatMessage {
            role: Role::User,
            content: user.to_string(),
        });
        Self {
            messages,
            temperature,
            max_tokens,
            model: model.to_string(),
        }
    }

    /// Single user message, no system slot.
    pub fn user_only(model: &str, user: &str, temperature: f64, max_tokens: u32) -> Self {
        Self::chat(model, None, user, temperature, max_tokens)
    }

    /// All message contents joined with newlines; the scripted provider
    /// matches its pattern table against this.
    pub fn rendered(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: UsageMeter,
    pub finish_reason: FinishReason,
}

/// Retry/timeout settings for the HTTP provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_base_backoff_ms")]
    pub base_backoff_ms: u64,
    #[serde(default = "default_backoff_multiplier")]
    pub backoff_multiplier: f64,
    #[serde(default = "default_per_call_timeout_ms")]
    pub per_call_timeout_ms: u64,
}

fn default_max_attempts() -> u32 {
    3
}
fn default_base_backoff_ms() -> u64 {
    500
}
fn default_backoff_multiplier() -> f64 {
    2.0
}
fn default_per_call_timeout_ms() -> u64 {
    60_000
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff_ms: 500,
            backoff_multiplier: 2.0,
            per_call_timeout_ms: 60_000,
        }
    }
}

/// Uniform completion contract served to all three agent roles. Providers
/// must be safe for concurrent calls; callers own parallelism.
pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

/// Accumulates a response's usage into a meter: token counts, wall time, and
/// call count each grow by the response's contribution.
pub fn accumulate_usage(meter: &UsageMeter, response: &ChatResponse) -> UsageMeter {
    meter.merged(&response.usage)
}

fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Deterministic offline provider. A FIFO queue is consulted first (strict
/// sequencing); when the queue is empty, the first pattern whose substring
/// occurs in the rendered prompt answers (order-insensitive tests). Performs
/// no I/O.
#[derive(Default)]
pub struct ScriptedProvider {
    queue: Mutex<VecDeque<String>>,
    patterns: Vec<(String, String)>,
    calls: AtomicU64,
}

impl ScriptedProvider {
    pub fn from_queue<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            queue: Mutex::new(items.into_iter().map(Into::into).collect()),
            patterns: Vec::new(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn from_patterns<I, S, T>(rules: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        Self {
            queue: Mutex::new(VecDeque::new()),
            patterns: rules
                .into_iter()
                .map(|(p, r)| (p.into(), r.into()))
                .collect(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn push(&self, response: impl Into<String>) {
        self.queue.lock().unwrap().push_back(response.into());
    }

    pub fn calls_made(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let rendered = request.rendered();
        let text = {
            let mut queue = self.queue.lock().unwrap();
            match queue.pop_front() {
                Some(t) => t,
                None => self
                    .patterns
                    .iter()
                    .find(|(pattern, _)| rendered.contains(pattern))
                    .map(|(_, reply)| reply.clone())
                    .ok_or(ProviderError::ScriptExhausted)?,
            }
        };
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(ChatResponse {
            usage: UsageMeter {
                prompt_tokens: approx_tokens(&rendered),
                completion_tokens: approx_tokens(&text),
                call_count: 1,
                wall_ms: 0,
            },
            text,
            finish_reason: FinishReason::Stop,
        })
    }
}

/// Connection settings for one agent role, as they appear in config files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProviderSpec {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_api_key_env() -> String {
    "SI_AGENT_API_KEY".to_string()
}

impl Default for RoleTemperatures {
    fn default() -> Self {
        Self {
            instructor: 1.0,
            follower: 0.0,
            judge: 0.0,
        }
    }
}

/// Sampling temperature defaults per agent role: exploration for the
/// instructor, stability for follower and judge.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoleTemperatures {
    pub instructor: f64,
    pub follower: f64,
    pub judge: f64,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// OpenAI-compatible chat-completions client: one POST per attempt under the
/// retry policy. Retries on timeouts, connection failures, 429 and 5xx;
/// any other 4xx is a non-retryable refusal.
pub struct HttpProvider {
    base_url: String,
    api_key: Option<String>,
    policy: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, policy: RetryPolicy) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(policy.per_call_timeout_ms))
            .build()
            .expect("reqwest client");
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            policy,
            client,
        }
    }

    /// Builds a provider from a config spec, reading the bearer token from
    /// the spec's environment variable.
    pub fn from_spec(spec: &ProviderSpec) -> Result<Self, ProviderError> {
        let api_key = std::env::var(&spec.api_key_env).ok();
        Ok(Self::new(&spec.base_url, api_key, spec.retry.clone()))
    }

    fn post_once(&self, request: &ChatRequest) -> Result<AttemptOutcome, String> {
        let body = WireRequest {
            model: &request.model,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: match m.role {
                        Role::System => "system",
                        Role::User => "user",
                        Role::Assistant => "assistant",
                    },
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let url = format!("{}/chat/completions", self.base_url);
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| e.to_string())?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Ok(AttemptOutcome::Retryable(format!("status {status}")));
        }
        if !status.is_success() {
            let message = response.text().unwrap_or_default();
            return Ok(AttemptOutcome::Refused {
                status: status.as_u16(),
                message,
            });
        }
        let parsed: WireResponse = response
            .json()
            .map_err(|e| format!("body parse failed: {e}"))?;
        Ok(AttemptOutcome::Success(parsed))
    }
}

enum AttemptOutcome {
    Success(WireResponse),
    Retryable(String),
    Refused { status: u16, message: String },
}

impl ChatProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let start = Instant::now();
        let mut last_error = String::new();
        let attempts = self.policy.max_attempts.max(1);
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.policy.base_backoff_ms as f64
                    * self.policy.backoff_multiplier.powi(attempt as i32 - 1);
                std::thread::sleep(Duration::from_millis(backoff as u64));
            }
            match self.post_once(request) {
                Ok(AttemptOutcome::Success(wire)) => {
                    let choice = wire.choices.into_iter().next().ok_or_else(|| {
                        ProviderError::MalformedResponse("no choices in response".into())
                    })?;
                    let text = choice.message.content.unwrap_or_default();
                    let usage = wire.usage.map(|u| (u.prompt_tokens, u.completion_tokens));
                    let (prompt_tokens, completion_tokens) =
                        usage.unwrap_or((approx_tokens(&request.rendered()), approx_tokens(&text)));
                    let finish_reason = match choice.finish_reason.as_deref() {
                        Some("length") => FinishReason::Length,
                        Some("error") => FinishReason::Error,
                        _ => FinishReason::Stop,
                    };
                    return Ok(ChatResponse {
                        text,
                        usage: UsageMeter {
                            prompt_tokens,
                            completion_tokens,
                            call_count: 1,
                            wall_ms: start.elapsed().as_millis() as u64,
                        },
                        finish_reason,
                    });
                }
                Ok(AttemptOutcome::Retryable(reason)) => last_error = reason,
                Ok(AttemptOutcome::Refused { status, message }) => {
                    return Err(ProviderError::Refusal { status, message })
                }
                Err(transport) => last_error = transport,
            }
        }
        Err(ProviderError::Transport {
            attempts,
            last_error,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    #[test]
    fn request_validation() {
        assert!(ChatRequest::new("m", vec![], 0.0, 10).is_err());
        let messages = vec![
            ChatMessage {
                role: Role::User,
                content: "hi".into(),
            },
            ChatMessage {
                role: Role::System,
                content: "late system".into(),
            },
        ];
        assert!(ChatRequest::new("m", messages, 0.0, 10).is_err());
    }

    #[test]
    fn scripted_queue_in_order() {
        let provider = ScriptedProvider::from_queue(["hello"]);
        let request = ChatRequest::user_only("m", "anything", 0.0, 16);
        let response = provider.complete(&request).unwrap();
        assert_eq!(response.text, "hello");
        assert_eq!(response.finish_reason, FinishReason::Stop);
        assert_eq!(response.usage.call_count, 1);
        assert!(matches!(
            provider.complete(&request),
            Err(ProviderError::ScriptExhausted)
        ));
    }

    #[test]
    fn scripted_patterns_after_queue() {
        let provider = ScriptedProvider::from_patterns([("weather", "sunny"), ("math", "42")]);
        provider.push("queued first");
        let request = ChatRequest::user_only("m", "a math question", 0.0, 16);
        assert_eq!(provider.complete(&request).unwrap().text, "queued first");
        assert_eq!(provider.complete(&request).unwrap().text, "42");
        let other = ChatRequest::user_only("m", "no rule matches this", 0.0, 16);
        assert!(matches!(
            provider.complete(&other),
            Err(ProviderError::ScriptExhausted)
        ));
    }

    #[test]
    fn scripted_is_deterministic() {
        let run = || {
            let provider = ScriptedProvider::from_patterns([("alpha", "one"), ("beta", "two")]);
            let requests = ["ask alpha", "ask beta", "ask alpha"];
            requests
                .iter()
                .map(|q| {
                    provider
                        .complete(&ChatRequest::user_only("m", q, 0.0, 16))
                        .unwrap()
                        .text
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn accumulate_usage_examples() {
        let response = ChatResponse {
            text: "x".into(),
            usage: UsageMeter {
                prompt_tokens: 10,
                completion_tokens: 5,
                call_count: 1,
                wall_ms: 2,
            },
            finish_reason: FinishReason::Stop,
        };
        let meter = accumulate_usage(&UsageMeter::default(), &response);
        assert_eq!(meter.prompt_tokens, 10);
        assert_eq!(meter.completion_tokens, 5);
        assert_eq!(meter.call_count, 1);
        let meter = accumulate_usage(&meter, &response);
        assert_eq!(meter.prompt_tokens, 20);
        assert_eq!(meter.completion_tokens, 10);
        assert_eq!(meter.call_count, 2);
    }

    /// Tiny single-purpose HTTP server: answers each accepted connection with
    /// the next queued (status, body) pair and counts hits.
    fn spawn_server(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let hits_clone = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = match listener.accept() {
                    Ok(s) => s,
                    Err(_) => return,
                };
                hits_clone.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).is_err() || line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut buf = vec![0u8; content_length];
                let _ = reader.read_exact(&mut buf);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn fast_policy() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_backoff_ms: 1,
            backoff_multiplier: 1.0,
            per_call_timeout_ms: 2_000,
        }
    }

    fn completion_body(text: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 7, "completion_tokens": 3}
        })
        .to_string()
    }

    #[test]
    fn http_success_parses_wire_format() {
        let (url, hits) = spawn_server(vec![(200, completion_body("pong"))]);
        let provider = HttpProvider::new(url, Some("key".into()), fast_policy());
        let response = provider
            .complete(&ChatRequest::chat("m", Some("sys"), "ping", 0.0, 32))
            .unwrap();
        assert_eq!(response.text, "pong");
        assert_eq!(response.usage.prompt_tokens, 7);
        assert_eq!(response.usage.completion_tokens, 3);
        assert_eq!(response.usage.call_count, 1);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn http_retries_on_429_then_succeeds() {
        let (url, hits) = spawn_server(vec![
            (429, "{}".into()),
            (500, "{}".into()),
            (200, completion_body("ok")),
        ]);
        let provider = HttpProvider::new(url, None, fast_policy());
        let response = provider
            .complete(&ChatRequest::user_only("m", "q", 0.0, 32))
            .unwrap();
        assert_eq!(response.text, "ok");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn http_does_not_retry_plain_4xx() {
        let (url, hits) = spawn_server(vec![(400, "bad".into()), (200, completion_body("x"))]);
        let provider = HttpProvider::new(url, None, fast_policy());
        let err = provider
            .complete(&ChatRequest::user_only("m", "q", 0.0, 32))
            .unwrap_err();
        assert!(matches!(err, ProviderError::Refusal { status: 400, .. }));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn http_transport_error_after_exactly_max_attempts() {
        // server closes each accepted connection without replying
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let hits_clone = hits.clone();
        std::thread::spawn(move || {
            while let Ok((stream, _)) = listener.accept() {
                hits_clone.fetch_add(1, Ordering::SeqCst);
                drop(stream);
            }
        });
        let provider = HttpProvider::new(format!("http://{addr}"), None, fast_policy());
        let err = provider
            .complete(&ChatRequest::user_only("m", "q", 0.0, 32))
            .unwrap_err();
        match err {
            ProviderError::Transport { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error: {other}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }
}
