//! Chat-model backends: a deterministic scripted mock and a live HTTP
//! client speaking the common chat-completions wire format, plus the
//! `{{name}}` prompt template renderer.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

/// One chat call: system + human prompt, optional image, sampling knobs.
///
/// Invariants: `temperature >= 0`, both prompts non-empty after rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub system_prompt: String,
    pub human_prompt: String,
    pub image_ref: Option<String>,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl LlmRequest {
    pub fn new(system_prompt: impl Into<String>, human_prompt: impl Into<String>) -> Self {
        LlmRequest {
            system_prompt: system_prompt.into(),
            human_prompt: human_prompt.into(),
            image_ref: None,
            temperature: 1.0,
            seed: Some(42),
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }
}

/// Model reply plus token usage. A refusal is data, not an error: the
/// text carries the refusal reason and downstream layers decide policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub model_id: String,
    pub refused: bool,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited by backend")]
    RateLimited,
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("unresolved placeholder {{{{{name}}}}}")]
    UnresolvedPlaceholder { name: String },
    #[error("mock script: {0}")]
    Script(String),
}

/// Substitutes every `{{name}}` placeholder from `ctx`; errors on the
/// first placeholder with no matching key, naming it.
pub fn render_prompt(template: &str, ctx: &BTreeMap<String, String>) -> Result<String, LlmError> {
    let re = placeholder_regex();
    for caps in re.captures_iter(template) {
        let name = caps.get(1).expect("capture group").as_str();
        if !ctx.contains_key(name) {
            return Err(LlmError::UnresolvedPlaceholder { name: name.to_string() });
        }
    }
    Ok(re
        .replace_all(template, |caps: &regex::Captures| ctx[&caps[1]].clone())
        .into_owned())
}

/// Placeholder names referenced by a template, in order of first appearance.
pub fn template_placeholders(template: &str) -> Vec<String> {
    let mut seen = Vec::new();
    for caps in placeholder_regex().captures_iter(template) {
        let name = caps[1].to_string();
        if !seen.contains(&name) {
            seen.push(name);
        }
    }
    seen
}

fn placeholder_regex() -> &'static regex::Regex {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"\{\{\s*([A-Za-z0-9_.\-]+)\s*\}\}").expect("valid regex"))
}

/// Common interface over the mock and live backends.
pub trait LlmClient: Send + Sync {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError>;
    fn model_id(&self) -> &str;
}

/// One scripted reply rule: first rule whose `matcher` appears as a
/// substring of the rendered system or human prompt wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub matcher: String,
    pub reply: String,
    #[serde(default)]
    pub refusal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

/// Ordered reply rules plus a guaranteed default, so every request gets a
/// deterministic answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default_reply: String,
}

impl MockScript {
    pub fn from_json_str(json: &str) -> Result<Self, LlmError> {
        serde_json::from_str(json).map_err(|e| LlmError::Script(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }
}

/// Deterministic backend driven by a [`MockScript`]. Pure: identical
/// requests always yield identical responses.
pub struct MockClient {
    script: MockScript,
    model_id: String,
}

impl MockClient {
    pub fn new(script: MockScript) -> Self {
        MockClient { script, model_id: "mock".to_string() }
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }
}

fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl LlmClient for MockClient {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let rule = self
            .script
            .rules
            .iter()
            .find(|r| req.system_prompt.contains(&r.matcher) || req.human_prompt.contains(&r.matcher));
        let (text, refused, prompt_tokens, completion_tokens) = match rule {
            Some(r) => (r.reply.clone(), r.refusal, r.prompt_tokens, r.completion_tokens),
            None => (self.script.default_reply.clone(), false, None, None),
        };
        let prompt_tokens = prompt_tokens
            .unwrap_or_else(|| approx_tokens(&req.system_prompt) + approx_tokens(&req.human_prompt));
        let completion_tokens = completion_tokens.unwrap_or_else(|| approx_tokens(&text));
        Ok(LlmResponse {
            text,
            prompt_tokens,
            completion_tokens,
            model_id: self.model_id.clone(),
            refused,
        })
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

/// Counting semaphore bounding concurrent live calls.
struct InFlight {
    permits: Mutex<usize>,
    available: Condvar,
}

impl InFlight {
    fn new(max: usize) -> Self {
        InFlight { permits: Mutex::new(max.max(1)), available: Condvar::new() }
    }

    fn acquire(&self) {
        let mut permits = self.permits.lock().expect("in-flight lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("in-flight wait");
        }
        *permits -= 1;
    }

    fn release(&self) {
        *self.permits.lock().expect("in-flight lock") += 1;
        self.available.notify_one();
    }
}

/// Live backend for any chat-completions-compatible endpoint. The API key
/// is read from the named environment variable at construction; a missing
/// variable means unauthenticated calls (useful for local inference
/// servers).
pub struct HttpClient {
    endpoint_url: String,
    model_id: String,
    api_key: Option<String>,
    in_flight: InFlight,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(
        endpoint_url: impl Into<String>,
        model_id: impl Into<String>,
        api_key_env: Option<&str>,
        max_in_flight: usize,
    ) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpClient {
            endpoint_url: endpoint_url.into(),
            model_id: model_id.into(),
            api_key: api_key_env.and_then(|name| std::env::var(name).ok()),
            in_flight: InFlight::new(max_in_flight),
            http,
        })
    }
}

/// Chat-completions request body; images ride as an `image_url` content
/// part on the user message.
pub fn chat_request_body(model_id: &str, req: &LlmRequest) -> serde_json::Value {
    let user_content = match &req.image_ref {
        None => serde_json::json!(req.human_prompt),
        Some(image) => serde_json::json!([
            {"type": "text", "text": req.human_prompt},
            {"type": "image_url", "image_url": {"url": image}},
        ]),
    };
    let mut body = serde_json::json!({
        "model": model_id,
        "temperature": req.temperature,
        "messages": [
            {"role": "system", "content": req.system_prompt},
            {"role": "user", "content": user_content},
        ],
    });
    if let Some(seed) = req.seed {
        body["seed"] = serde_json::json!(seed);
    }
    body
}

/// Pulls text, token usage, and the refusal flag out of a chat-completions
/// response. `finish_reason = "content_filter"` marks a refusal.
pub fn parse_chat_response(body: &str, model_id: &str) -> Result<LlmResponse, LlmError> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LlmError::MalformedResponse("no choices".to_string()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| LlmError::MalformedResponse("no message content".to_string()))?
        .to_string();
    let refused = choice
        .get("finish_reason")
        .and_then(|f| f.as_str())
        .is_some_and(|f| f == "content_filter");
    let usage = |key: &str| {
        value
            .pointer(&format!("/usage/{key}"))
            .and_then(|v| v.as_u64())
            .unwrap_or(0)
    };
    Ok(LlmResponse {
        text,
        prompt_tokens: usage("prompt_tokens"),
        completion_tokens: usage("completion_tokens"),
        model_id: value
            .get("model")
            .and_then(|m| m.as_str())
            .unwrap_or(model_id)
            .to_string(),
        refused,
    })
}

impl LlmClient for HttpClient {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        self.in_flight.acquire();
        let result = self.complete_inner(req);
        self.in_flight.release();
        result
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

impl HttpClient {
    fn complete_inner(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let body = chat_request_body(&self.model_id, req);
        let mut builder = self.http.post(&self.endpoint_url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if status.as_u16() == 429 {
            return Err(LlmError::RateLimited);
        }
        if !status.is_success() {
            return Err(LlmError::Transport(format!("HTTP {status}: {text}")));
        }
        parse_chat_response(&text, &self.model_id)
    }
}
