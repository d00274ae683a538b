//! Model backends (chat completion) and API executors.

mod chat;
mod executor;
mod scripted;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::HttpFailure;

pub use chat::{HttpChatBackend, HttpChatConfig};
pub use executor::{
    ApiExecutor, ApiResponse, Binding, BindingKind, ExecError, RegistryExecutor, DEFAULT_MAX_BODY_BYTES,
};
pub use scripted::{Rule, Script, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("no messages to complete")]
    EmptyMessages,
    #[error("backend timed out")]
    Timeout,
    #[error("backend HTTP error (status {status:?}): {body}")]
    HttpError { status: Option<u16>, body: String },
    #[error("backend rate limited; retry after {retry_after:?}")]
    RateLimited { retry_after: Option<Duration> },
    #[error("scripted backend has no response for this conversation")]
    ScriptExhausted,
    #[error("unexpected backend response: {0}")]
    BadResponse(String),
}

impl From<HttpFailure> for BackendError {
    fn from(f: HttpFailure) -> Self {
        match f {
            HttpFailure::Timeout { .. } => BackendError::Timeout,
            HttpFailure::RateLimited { retry_after, .. } => BackendError::RateLimited { retry_after },
            HttpFailure::Status { status, body, .. } => BackendError::HttpError { status, body },
        }
    }
}

/// A chat model. `complete` must return within the backend's configured
/// timeout, either with text or a typed error. Implementations must be safe
/// for concurrent use.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    fn supports_system_prompt(&self) -> bool {
        true
    }

    fn complete(&self, messages: &[Message]) -> Result<String, BackendError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for std::sync::Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn supports_system_prompt(&self) -> bool {
        (**self).supports_system_prompt()
    }
    fn complete(&self, messages: &[Message]) -> Result<String, BackendError> {
        (**self).complete(messages)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for &B {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn supports_system_prompt(&self) -> bool {
        (**self).supports_system_prompt()
    }
    fn complete(&self, messages: &[Message]) -> Result<String, BackendError> {
        (**self).complete(messages)
    }
}

/// Checks the message precondition, then asks the backend.
pub fn complete(backend: &dyn ModelBackend, messages: &[Message]) -> Result<String, BackendError> {
    if messages.is_empty() {
        return Err(BackendError::EmptyMessages);
    }
    backend.complete(messages)
}
