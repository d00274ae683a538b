use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, Message, ModelBackend, Role};
use crate::http::{self, HttpStats, RetryPolicy};

#[derive(Debug, Clone)]
pub struct HttpChatConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub supports_system_prompt: bool,
}

impl HttpChatConfig {
    /// Reads the key from `MODEL_API_KEY` when set.
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var("MODEL_API_KEY").ok(),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            supports_system_prompt: true,
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

/// Chat-completion backend: POST `{"model", "messages"}` and read
/// `choices[0].message.content`.
pub struct HttpChatBackend {
    cfg: HttpChatConfig,
    name: String,
    client: reqwest::blocking::Client,
    stats: HttpStats,
}

impl HttpChatBackend {
    pub fn new(cfg: HttpChatConfig) -> Self {
        Self {
            name: format!("http:{}", cfg.model),
            client: http::build_client(cfg.timeout),
            cfg,
            stats: HttpStats::default(),
        }
    }

    pub fn stats(&self) -> &HttpStats {
        &self.stats
    }

    /// Models without a system role get the system text prepended to the
    /// first user turn.
    fn prepare(&self, messages: &[Message]) -> Vec<Message> {
        if self.cfg.supports_system_prompt {
            return messages.to_vec();
        }
        let system: Vec<&str> = messages
            .iter()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .collect();
        let mut out: Vec<Message> = messages.iter().filter(|m| m.role != Role::System).cloned().collect();
        if !system.is_empty() {
            if let Some(first) = out.iter_mut().find(|m| m.role == Role::User) {
                first.content = format!("{}\n\n{}", system.join("\n\n"), first.content);
            }
        }
        out
    }
}

impl ModelBackend for HttpChatBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_system_prompt(&self) -> bool {
        self.cfg.supports_system_prompt
    }

    fn complete(&self, messages: &[Message]) -> Result<String, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::EmptyMessages);
        }
        let prepared = self.prepare(messages);
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: &prepared,
        };
        let ex = http::send_with_retry(&self.cfg.retry, &self.stats, || {
            let req = self.client.post(&self.cfg.endpoint).json(&body);
            match &self.cfg.api_key {
                Some(k) => req.bearer_auth(k),
                None => req,
            }
        })?;
        if !(200..300).contains(&ex.status) {
            return Err(BackendError::HttpError {
                status: Some(ex.status),
                body: http::excerpt(&ex.body),
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&ex.body).map_err(|e| BackendError::BadResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::BadResponse("no choices[0].message.content".into()))
    }
}
