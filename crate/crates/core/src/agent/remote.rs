//! OpenAI-compatible chat-completions client with base64 data-URL images.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backend::{BackendError, Completion, LmmBackend, Usage};
use super::conversation::{Conversation, Part};
use crate::raster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    /// Retries after the first attempt for transport errors, 429 and 5xx.
    pub max_retries: u32,
    pub backoff_ms: u64,
    /// Minimum spacing between requests across all callers of this backend.
    pub min_interval_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-5".into(),
            temperature: None,
            max_tokens: None,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            max_retries: 3,
            backoff_ms: 1000,
            min_interval_ms: 0,
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    last_request: Mutex<Option<Instant>>,
}

impl RemoteBackend {
    /// Reads the API key from the configured environment variable, if set.
    pub fn new(config: RemoteConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: RemoteConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend {
            config,
            api_key,
            agent,
            last_request: Mutex::new(None),
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn wait_for_slot(&self) {
        let interval = Duration::from_millis(self.config.min_interval_ms);
        if interval.is_zero() {
            return;
        }
        let mut last = self.last_request.lock().unwrap();
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < interval {
                thread::sleep(interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn attempt(&self, body: &Value) -> Result<Completion, (BackendError, bool)> {
        self.wait_for_slot();
        let mut req = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => (BackendError::Timeout(e.to_string()), true),
            other => (BackendError::Transport(other.to_string()), true),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (BackendError::Transport(e.to_string()), true))?;
        match status {
            200..=299 => parse_response(&text).map_err(|e| (e, false)),
            401 | 403 => Err((BackendError::Auth(format!("HTTP {status}: {text}")), false)),
            408 => Err((BackendError::Timeout(format!("HTTP {status}")), true)),
            429 | 500..=599 => Err((BackendError::Transport(format!("HTTP {status}: {text}")), true)),
            _ => Err((BackendError::Malformed(format!("HTTP {status}: {text}")), false)),
        }
    }
}

/// Serializes a conversation into the chat-completions request body.
pub fn request_body(config: &RemoteConfig, conversation: &Conversation) -> Value {
    let messages: Vec<Value> = conversation
        .messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text(t) => json!({"type": "text", "text": t}),
                    Part::Image(img) => json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:image/png;base64,{}", BASE64.encode(raster::encode_png(img)))}
                    }),
                })
                .collect();
            json!({"role": m.role.as_str(), "content": content})
        })
        .collect();
    let mut body = json!({
        "model": config.model,
        "messages": messages,
        "seed": conversation.seed,
    });
    if let Some(t) = config.temperature {
        body["temperature"] = json!(t);
    }
    if let Some(n) = config.max_tokens {
        body["max_tokens"] = json!(n);
    }
    body
}

/// Extracts the reply text and token usage from a chat-completions response.
pub fn parse_response(text: &str) -> Result<Completion, BackendError> {
    let v: Value = serde_json::from_str(text).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?;
    let reply = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        other => return Err(BackendError::Malformed(format!("unexpected content {other}"))),
    };
    let usage = v.get("usage").map(|u| Usage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    });
    Ok(Completion { text: reply, usage })
}

impl LmmBackend for RemoteBackend {
    fn complete(&self, conversation: &Conversation) -> Result<Completion, BackendError> {
        let body = request_body(&self.config, conversation);
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(c) => return Ok(c),
                Err((err, retryable)) => {
                    if !retryable || attempt >= self.config.max_retries {
                        return Err(err);
                    }
                    attempt += 1;
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }

    fn name(&self) -> &str {
        &self.config.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::conversation::{Message, Role};
    use image::RgbImage;
    use std::sync::Arc;

    #[test]
    fn body_carries_text_and_data_url_images() {
        let mut conv = Conversation::new(5);
        conv.push(Message::with_image(Role::User, "look", Arc::new(RgbImage::new(4, 3))));
        let cfg = RemoteConfig {
            temperature: Some(0.2),
            ..Default::default()
        };
        let body = request_body(&cfg, &conv);
        assert_eq!(body["model"], "gpt-5");
        assert_eq!(body["seed"], 5);
        assert_eq!(body["temperature"], 0.2);
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["type"], "image_url");
        let url = content[0]["image_url"]["url"].as_str().unwrap();
        let png = BASE64.decode(url.strip_prefix("data:image/png;base64,").unwrap()).unwrap();
        assert_eq!(image::load_from_memory(&png).unwrap().into_rgb8().dimensions(), (4, 3));
        assert_eq!(content[1], json!({"type": "text", "text": "look"}));
    }

    #[test]
    fn response_parsing() {
        let c = parse_response(r#"{"choices":[{"message":{"content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#).unwrap();
        assert_eq!(c.text, "hi");
        assert_eq!(c.usage, Some(Usage { prompt_tokens: 3, completion_tokens: 1 }));
        let c = parse_response(r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#).unwrap();
        assert_eq!(c.text, "ab");
        assert!(matches!(parse_response("{}"), Err(BackendError::Malformed(_))));
        assert!(matches!(parse_response("nope"), Err(BackendError::Malformed(_))));
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        let cfg = RemoteConfig {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            timeout_secs: 2,
            backoff_ms: 1,
            ..Default::default()
        };
        let backend = RemoteBackend::with_key(cfg, None);
        let start = Instant::now();
        let err = backend.complete(&Conversation::new(0)).unwrap_err();
        assert!(matches!(err, BackendError::Transport(_) | BackendError::Timeout(_)), "{err:?}");
        assert!(start.elapsed() >= Duration::from_millis(1 + 2 + 4));
    }
}
