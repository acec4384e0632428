//! Wire adapters for the two chat-completion dialects.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendConfig, BackendError, ChatRequest, Role};

const OPENAI_DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";
const ANTHROPIC_DEFAULT_ENDPOINT: &str = "https://api.anthropic.com/v1";
const ANTHROPIC_VERSION: &str = "2023-06-01";

fn agent(cfg: &BackendConfig) -> ureq::Agent {
    ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(cfg.timeout_secs))
        .build()
}

fn credential(env: Option<&str>) -> Result<String, BackendError> {
    let name = env.ok_or_else(|| BackendError::Auth("no api_key_env configured".into()))?;
    std::env::var(name).map_err(|_| BackendError::Auth(format!("environment variable {name} is not set")))
}

fn map_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Status(code, resp) => {
            let body = resp.into_string().unwrap_or_default();
            let msg = format!("HTTP {code}: {}", body.chars().take(300).collect::<String>());
            match code {
                401 | 403 => BackendError::Auth(msg),
                408 | 409 | 425 | 429 | 500..=599 => BackendError::Transient(msg),
                _ => BackendError::Fatal(msg),
            }
        }
        ureq::Error::Transport(t) => {
            let msg = t.to_string();
            let lower = msg.to_lowercase();
            if lower.contains("timed out") || lower.contains("timeout") {
                BackendError::Timeout
            } else {
                BackendError::Transient(msg)
            }
        }
    }
}

fn read_json(resp: ureq::Response) -> Result<Value, BackendError> {
    resp.into_json::<Value>()
        .map_err(|e| BackendError::Transient(format!("unreadable response body: {e}")))
}

fn endpoint(cfg: &BackendConfig, default: &str) -> String {
    cfg.endpoint
        .as_deref()
        .unwrap_or(default)
        .trim_end_matches('/')
        .to_string()
}

/// `POST {endpoint}/chat/completions` and `POST {endpoint}/embeddings`,
/// bearer-token auth.
pub struct OpenAiBackend {
    agent: ureq::Agent,
    endpoint: String,
    key_env: Option<String>,
}

impl OpenAiBackend {
    pub fn new(cfg: &BackendConfig) -> Self {
        OpenAiBackend {
            agent: agent(cfg),
            endpoint: endpoint(cfg, OPENAI_DEFAULT_ENDPOINT),
            key_env: cfg.api_key_env.clone(),
        }
    }

    pub fn request_body(req: &ChatRequest) -> Value {
        json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }

    pub fn parse_response(v: &Value) -> Result<String, BackendError> {
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Fatal(format!("unexpected response shape: {v}")))
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, BackendError> {
        let key = credential(self.key_env.as_deref())?;
        let resp = self
            .agent
            .post(&format!("{}/{path}", self.endpoint))
            .set("Authorization", &format!("Bearer {key}"))
            .send_json(body)
            .map_err(map_error)?;
        read_json(resp)
    }
}

impl Backend for OpenAiBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let v = self.post("chat/completions", Self::request_body(req))?;
        Self::parse_response(&v)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let v = self.post("embeddings", json!({ "model": model, "input": texts }))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Fatal(format!("unexpected embedding response: {v}")))?;
        let mut out: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let idx = item.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
            let vec = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| BackendError::Fatal("embedding item without vector".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| BackendError::Fatal("non-numeric embedding".into())))
                .collect::<Result<Vec<f64>, _>>()?;
            out.push((idx, vec));
        }
        out.sort_by_key(|(i, _)| *i);
        Ok(out.into_iter().map(|(_, v)| v).collect())
    }
}

/// `POST {endpoint}/messages` with `x-api-key` auth. System messages move
/// into the top-level `system` field.
pub struct AnthropicBackend {
    agent: ureq::Agent,
    endpoint: String,
    key_env: Option<String>,
}

impl AnthropicBackend {
    pub fn new(cfg: &BackendConfig) -> Self {
        AnthropicBackend {
            agent: agent(cfg),
            endpoint: endpoint(cfg, ANTHROPIC_DEFAULT_ENDPOINT),
            key_env: cfg.api_key_env.clone(),
        }
    }

    pub fn request_body(req: &ChatRequest) -> Value {
        let messages: Vec<Value> = req
            .messages
            .iter()
            .filter(|m| m.role != Role::System)
            .map(|m| json!({ "role": m.role, "content": m.content }))
            .collect();
        let mut body = json!({
            "model": req.model,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "messages": messages,
        });
        let system = req.system_text();
        if !system.is_empty() {
            body["system"] = Value::String(system);
        }
        body
    }

    pub fn parse_response(v: &Value) -> Result<String, BackendError> {
        let blocks = v
            .get("content")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Fatal(format!("unexpected response shape: {v}")))?;
        Ok(blocks
            .iter()
            .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
            .filter_map(|b| b.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""))
    }
}

impl Backend for AnthropicBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let key = credential(self.key_env.as_deref())?;
        let resp = self
            .agent
            .post(&format!("{}/messages", self.endpoint))
            .set("x-api-key", &key)
            .set("anthropic-version", ANTHROPIC_VERSION)
            .send_json(Self::request_body(req))
            .map_err(map_error)?;
        Self::parse_response(&read_json(resp)?)
    }
}
