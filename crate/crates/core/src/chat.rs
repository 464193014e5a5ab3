//! Blocking client for OpenAI-compatible chat-completions endpoints.
//!
//! Requests are serialized once; the exact bytes sent are the bytes written to
//! the call archive. Transport errors, HTTP 429 and 5xx responses are retried
//! with exponential backoff up to `max_retries` times. A shared limiter caps the
//! number of requests in flight across all branches.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const API_KEY_ENV: &str = "MISINFO_API_KEY";
pub const API_BASE_ENV: &str = "MISINFO_API_BASE";

const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{call}: gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        call: String,
        attempts: u32,
        last: String,
    },
    #[error("{call}: HTTP {status}: {body}")]
    Status { call: String, status: u16, body: String },
    #[error("{call}: empty completion")]
    EmptyCompletion { call: String },
    #[error("{call}: malformed response: {message}")]
    MalformedResponse { call: String, message: String },
    #[error("call archive: {0}")]
    Archive(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// Coordinates of a backend call, used for call ids and error context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallContext {
    pub domain_id: String,
    pub branch_index: u32,
    pub node_index: u32,
    pub role: String,
}

impl CallContext {
    pub fn new(domain_id: &str, branch_index: u32, node_index: u32) -> Self {
        Self {
            domain_id: domain_id.to_string(),
            branch_index,
            node_index,
            role: String::new(),
        }
    }

    pub fn with_role(&self, role: &str) -> Self {
        Self {
            role: role.to_string(),
            ..self.clone()
        }
    }

    pub fn label(&self) -> String {
        format!("{}/b{}/k{}", self.domain_id, self.branch_index, self.node_index)
    }

    pub fn call_id(&self, attempt: u32) -> String {
        format!("{}/{}/{}", self.label(), self.role, attempt)
    }
}

/// One archived exchange, one JSON line in `calls.log`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call_id: String,
    pub url: String,
    pub request: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Append-only archive of raw backend exchanges.
pub struct CallLog {
    out: Mutex<BufWriter<File>>,
}

impl CallLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn append(&self, record: &CallRecord) -> std::io::Result<()> {
        let line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(out, "{line}")?;
        out.flush()
    }
}

/// Counting semaphore bounding concurrent requests.
pub struct Limiter {
    available: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(max_in_flight: usize) -> Self {
        Self {
            available: Mutex::new(max_in_flight.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct ClientSettings {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
    pub max_retries: u32,
    pub retry_base: Duration,
    pub api_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub content: String,
    pub call_id: String,
}

pub struct ChatClient {
    settings: ClientSettings,
    agent: ureq::Agent,
    limiter: Arc<Limiter>,
    archive: Option<Arc<CallLog>>,
}

impl ChatClient {
    pub fn new(settings: ClientSettings, limiter: Arc<Limiter>, archive: Option<Arc<CallLog>>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            settings,
            agent,
            limiter,
            archive,
        }
    }

    pub fn settings(&self) -> &ClientSettings {
        &self.settings
    }

    pub fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.settings.endpoint.trim_end_matches('/'))
    }

    /// Builds the JSON request body. `extra` keys are merged at the top level.
    pub fn request_body(&self, messages: &[(Role, String)], extra: Option<&Value>) -> String {
        let msgs: Vec<Value> = messages
            .iter()
            .map(|(role, content)| json!({ "role": role.as_str(), "content": content }))
            .collect();
        let mut body = json!({
            "model": self.settings.model,
            "messages": msgs,
            "temperature": self.settings.temperature,
        });
        if let (Some(Value::Object(extra)), Value::Object(map)) = (extra, &mut body) {
            for (k, v) in extra {
                map.insert(k.clone(), v.clone());
            }
        }
        body.to_string()
    }

    pub fn complete(
        &self,
        messages: &[(Role, String)],
        extra: Option<&Value>,
        ctx: &CallContext,
    ) -> Result<Completion, BackendError> {
        let body = self.request_body(messages, extra);
        let url = self.url();
        let attempts = self.settings.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            let call_id = ctx.call_id(attempt);
            let outcome = {
                let _permit = self.limiter.acquire();
                self.send(&url, &body)
            };
            let mut record = CallRecord {
                call_id: call_id.clone(),
                url: url.clone(),
                request: body.clone(),
                status: None,
                response: None,
                error: None,
            };
            let retry_after = match outcome {
                Ok((status, retry_after, text)) => {
                    record.status = Some(status);
                    record.response = Some(text.clone());
                    self.archive(&record)?;
                    if status == 200 {
                        return extract_content(&text, &call_id).map(|content| Completion { content, call_id });
                    }
                    if status != 429 && status < 500 {
                        return Err(BackendError::Status {
                            call: call_id,
                            status,
                            body: text,
                        });
                    }
                    last = format!("HTTP {status}");
                    retry_after
                }
                Err(e) => {
                    record.error = Some(e.clone());
                    self.archive(&record)?;
                    last = e;
                    None
                }
            };
            if attempt + 1 < attempts {
                let backoff = retry_after.unwrap_or_else(|| self.backoff(attempt));
                log::warn!("{call_id}: {last}; retrying in {backoff:?}");
                thread::sleep(backoff);
            }
        }
        Err(BackendError::RetriesExhausted {
            call: ctx.label(),
            attempts,
            last,
        })
    }

    fn backoff(&self, attempt: u32) -> Duration {
        self.settings
            .retry_base
            .saturating_mul(1u32 << attempt.min(16))
            .min(MAX_BACKOFF)
    }

    fn send(&self, url: &str, body: &str) -> Result<(u16, Option<Duration>, String), String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.settings.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(|s| Duration::from_secs(s).min(MAX_BACKOFF));
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, retry_after, text))
    }

    fn archive(&self, record: &CallRecord) -> Result<(), BackendError> {
        if let Some(log) = &self.archive {
            log.append(record)?;
        }
        Ok(())
    }
}

fn extract_content(text: &str, call_id: &str) -> Result<String, BackendError> {
    let malformed = |message: &str| BackendError::MalformedResponse {
        call: call_id.to_string(),
        message: message.to_string(),
    };
    let v: Value = serde_json::from_str(text).map_err(|e| malformed(&e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| malformed("no choices[0].message.content"))?;
    match content {
        Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
        Value::String(_) | Value::Null => Err(BackendError::EmptyCompletion {
            call: call_id.to_string(),
        }),
        _ => Err(malformed("content is not a string")),
    }
}
