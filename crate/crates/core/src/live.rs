//! OpenAI-compatible chat-completions backend for live experts.
//!
//! One request per call: the Level-2 skill document is the system message
//! and the dispatched query the user message. Failures never propagate out
//! of [`call_live_expert`]; they become sentinel observations.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::sentinel;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LiveEndpoint {
    /// Base URL; `/chat/completions` is appended unless already present.
    pub url: String,
    /// Environment variable holding the bearer token, if any.
    pub auth_env: Option<String>,
}

impl LiveEndpoint {
    pub fn completions_url(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// Remaining live calls for one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallBudget {
    remaining: usize,
}

impl CallBudget {
    pub fn new(calls: usize) -> Self {
        CallBudget { remaining: calls }
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    fn take(&mut self) -> Result<(), LiveError> {
        if self.remaining == 0 {
            return Err(LiveError::BudgetExhausted);
        }
        self.remaining -= 1;
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LiveError {
    #[error("expert call timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("per-episode call budget exhausted")]
    BudgetExhausted,
}

impl LiveError {
    pub fn sentinel(&self) -> String {
        match self {
            LiveError::Timeout => sentinel::TIMEOUT.to_string(),
            LiveError::BudgetExhausted => sentinel::BUDGET_EXHAUSTED.to_string(),
            LiveError::Transport(detail) => sentinel::transport(detail),
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

fn classify(err: ureq::Error) -> LiveError {
    match err {
        ureq::Error::Timeout(_) => LiveError::Timeout,
        ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            LiveError::Timeout
        }
        ureq::Error::StatusCode(code) => LiveError::Transport(format!("http status {code}")),
        other => LiveError::Transport(other.to_string()),
    }
}

/// Performs the request and returns the assistant text.
pub fn try_call_live_expert(
    endpoint: &LiveEndpoint,
    model_id: &str,
    skill_doc: &str,
    query: &str,
    timeout: Duration,
    budget: &mut CallBudget,
) -> Result<String, LiveError> {
    budget.take()?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into();
    let body = ChatRequest {
        model: model_id,
        messages: [
            ChatMessage {
                role: "system",
                content: skill_doc,
            },
            ChatMessage {
                role: "user",
                content: query,
            },
        ],
    };
    let mut request = agent.post(endpoint.completions_url());
    if let Some(var) = &endpoint.auth_env {
        if let Ok(token) = std::env::var(var) {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
    }
    let mut response = request.send_json(&body).map_err(classify)?;
    let parsed: ChatResponse = response.body_mut().read_json().map_err(classify)?;
    let text = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| LiveError::Transport("response has no message content".into()))?;
    Ok(text)
}

/// Like [`try_call_live_expert`] but maps every failure to its sentinel.
pub fn call_live_expert(
    endpoint: &LiveEndpoint,
    model_id: &str,
    skill_doc: &str,
    query: &str,
    timeout: Duration,
    budget: &mut CallBudget,
) -> String {
    try_call_live_expert(endpoint, model_id, skill_doc, query, timeout, budget).unwrap_or_else(|e| e.sentinel())
}
