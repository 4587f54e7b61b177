//! Client for OpenAI-compatible `/chat/completions` endpoints.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retry::{AttemptError, RetryPolicy};

use super::{CompletionRequest, LanguageModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body. Field order is the wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: usize,
    pub n: u32,
}

impl ChatRequest {
    pub fn single_turn(model: &str, prompt: &str, temperature: f64, max_tokens: usize) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".to_string(),
                content: prompt.to_string(),
            }],
            temperature,
            max_tokens,
            n: 1,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

enum Failure {
    Retryable(String),
    Protocol(String),
}

pub struct OpenAiCompatible {
    endpoint: String,
    model: String,
    retry: RetryPolicy,
    api_key: Option<String>,
    extra_headers: BTreeMap<String, String>,
    client: reqwest::blocking::Client,
}

impl OpenAiCompatible {
    pub fn new(
        endpoint: &str,
        model: &str,
        timeout: Duration,
        retry: RetryPolicy,
        api_key: Option<String>,
        extra_headers: BTreeMap<String, String>,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(OpenAiCompatible {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            retry,
            api_key,
            extra_headers,
            client,
        })
    }

    fn attempt(&self, body: &ChatRequest) -> std::result::Result<String, AttemptError<Failure>> {
        let mut req = self
            .client
            .post(format!("{}/chat/completions", self.endpoint))
            .json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        for (k, v) in &self.extra_headers {
            req = req.header(k, v);
        }
        // connection failures and timeouts are transient
        let resp = req
            .send()
            .map_err(|e| AttemptError::Retryable(Failure::Retryable(e.to_string())))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Retryable(Failure::Retryable(format!("HTTP {status}"))));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(AttemptError::Fatal(Failure::Protocol(format!("HTTP {status}: {text}"))));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| AttemptError::Fatal(Failure::Protocol(format!("bad response body: {e}"))))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| AttemptError::Fatal(Failure::Protocol("response has no choices[0].message.content".into())))
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Retryable(m) | Failure::Protocol(m) => f.write_str(m),
        }
    }
}

impl LanguageModel for OpenAiCompatible {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String> {
        let body = ChatRequest::single_turn(&self.model, req.prompt, req.temperature, req.max_tokens);
        self.retry.run(|_| self.attempt(&body)).map_err(|f| match f {
            Failure::Retryable(m) => Error::Backend(format!("retries exhausted: {m}")),
            Failure::Protocol(m) => Error::Protocol(m),
        })
    }

    fn identifier(&self) -> String {
        format!("openai_compatible({}, {})", self.endpoint, self.model)
    }
}
