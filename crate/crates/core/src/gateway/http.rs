use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use super::{ChatMessage, ChatRequest, Provider, ProviderError};

/// Chat-completion endpoint speaking the common `/chat/completions` shape.
pub struct HttpProvider {
    id: String,
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpProvider {
    /// `base_url` is the API root; `/chat/completions` is appended.
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));
        HttpProvider {
            id: format!("http:{url}"),
            url,
            api_key,
            agent,
        }
    }

    pub fn from_env(base_url: &str, timeout: Duration) -> Self {
        let key = std::env::var(super::API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(base_url, key, timeout)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
}

fn extract_content(payload: &Value) -> Option<String> {
    payload
        .get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(str::to_string)
}

impl Provider for HttpProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let body = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
            top_p: request.top_p,
            max_tokens: request.max_tokens,
        };
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(ProviderError::Auth(format!("HTTP {status}: {text}"))),
            408 | 429 | 500..=599 => {
                return Err(ProviderError::Transient(format!("HTTP {status}: {text}")))
            }
            _ => return Err(ProviderError::Fatal(format!("HTTP {status}: {text}"))),
        }
        let payload: Value =
            serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        extract_content(&payload)
            .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))
    }
}
