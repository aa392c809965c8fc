use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use tracing::warn;

use super::{check_messages, BackendError, ChatBackend, ChatMessage, Decoding, PromptKind};

/// OpenAI-compatible chat-completions client (blocking).
///
/// Transport failures are retried once. Non-2xx responses are surfaced
/// immediately with their status code.
pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    decoding: Decoding,
    api_key: Option<String>,
    gate: InFlightGate,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("decoding", &self.decoding)
            .finish_non_exhaustive()
    }
}

const TRANSPORT_ATTEMPTS: usize = 2;

impl RemoteBackend {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        decoding: Decoding,
        api_key: Option<String>,
        max_in_flight: usize,
        timeout: Duration,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
            model: model.into(),
            decoding,
            api_key,
            gate: InFlightGate::new(max_in_flight.max(1)),
        }
    }

    fn request_body(&self, messages: &[ChatMessage]) -> Value {
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.decoding.temperature,
            "max_tokens": self.decoding.max_tokens,
        })
    }

    fn send_once(&self, body: &Value) -> Result<String, BackendError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = req
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Remote { status, body: text });
        }
        extract_content(&text)
    }
}

fn extract_content(text: &str) -> Result<String, BackendError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| BackendError::Response(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Response("missing choices[0].message.content".into()))
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, kind: PromptKind, messages: &[ChatMessage]) -> Result<String, BackendError> {
        check_messages(messages)?;
        let body = self.request_body(messages);
        let _permit = self.gate.acquire();
        let mut last = None;
        for attempt in 1..=TRANSPORT_ATTEMPTS {
            match self.send_once(&body) {
                Err(BackendError::Transport(e)) => {
                    warn!(%kind, attempt, error = %e, "chat transport failure");
                    last = Some(BackendError::Transport(e));
                }
                other => return other,
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlightGate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}
