//! OpenAI-style chat-completions client that reads the top-k
//! log-probabilities of the first generated token.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest};

/// Minimum top-k requested; fewer risks dropping in-alphabet labels.
pub const MIN_TOP_K: u32 = 20;

/// How the image reaches the endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageMode {
    /// Read `root/image_ref` and inline it as a base64 data URL.
    InlineBase64 { root: PathBuf },
    /// Send `base_url/image_ref` and let the server fetch it.
    Url { base_url: String },
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// e.g. `http://127.0.0.1:8000/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub top_k: u32,
    pub timeout: Duration,
    /// Attempts after the first one for retryable failures.
    pub retries: u32,
    pub retry_delay: Duration,
    pub image_mode: ImageMode,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, image_mode: ImageMode) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            top_k: MIN_TOP_K,
            timeout: Duration::from_secs(60),
            retries: 2,
            retry_delay: Duration::from_millis(500),
            image_mode,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

enum Failure {
    Retry(BackendError),
    Fatal(BackendError),
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/png",
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Extracts per-label log-probabilities at the first generated position.
/// Tokens are matched after trimming whitespace; variants of one label
/// (`"a"`, `" a"`) are merged by summing their probabilities.
pub fn parse_top_logprobs(body: &Value, labels: &[char]) -> Result<HashMap<char, f64>, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Malformed("response has no choices".into()))?;
    let logprobs = choice
        .get("logprobs")
        .filter(|v| !v.is_null())
        .ok_or_else(|| BackendError::Malformed("response has no logprobs".into()))?;

    let mut candidates: Vec<(String, f64)> = Vec::new();
    if let Some(first) = logprobs.get("content").and_then(|c| c.get(0)) {
        let top = first
            .get("top_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Malformed("missing top_logprobs at position 0".into()))?;
        for entry in top {
            let token = entry.get("token").and_then(Value::as_str);
            let logprob = entry.get("logprob").and_then(Value::as_f64);
            match (token, logprob) {
                (Some(t), Some(lp)) => candidates.push((t.to_string(), lp)),
                _ => return Err(BackendError::Malformed(format!("bad top_logprobs entry {entry}"))),
            }
        }
    } else if let Some(map) = logprobs
        .get("top_logprobs")
        .and_then(|t| t.get(0))
        .and_then(Value::as_object)
    {
        // legacy completions layout: [{token: logprob, ...}, ...]
        for (token, lp) in map {
            let lp = lp
                .as_f64()
                .ok_or_else(|| BackendError::Malformed(format!("bad logprob for `{token}`")))?;
            candidates.push((token.clone(), lp));
        }
    } else {
        return Err(BackendError::Malformed("no log-probabilities at position 0".into()));
    }

    let mut scores: HashMap<char, f64> = HashMap::new();
    for (token, lp) in candidates {
        let trimmed = token.trim();
        let mut chars = trimmed.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            continue;
        };
        if !labels.contains(&c) {
            continue;
        }
        scores
            .entry(c)
            .and_modify(|acc| *acc = log_sum_exp(*acc, lp))
            .or_insert(lp);
    }
    Ok(scores)
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn image_url(&self, image_ref: &str) -> Result<String, BackendError> {
        match &self.config.image_mode {
            ImageMode::InlineBase64 { root } => {
                let path = root.join(image_ref);
                let bytes = std::fs::read(&path)
                    .map_err(|e| BackendError::Io(format!("cannot read {}: {e}", path.display())))?;
                let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
                Ok(format!("data:{};base64,{encoded}", mime_for(&path)))
            }
            ImageMode::Url { base_url } => Ok(format!("{}/{}", base_url.trim_end_matches('/'), image_ref)),
        }
    }

    /// Request body sent for `request`.
    pub fn request_body(&self, request: &BackendRequest) -> Result<Value, BackendError> {
        Ok(json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": [
                    {"type": "image_url", "image_url": {"url": self.image_url(&request.image_ref)?}},
                    {"type": "text", "text": request.user_text},
                ]},
            ],
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": true,
            "top_logprobs": self.config.top_k.max(MIN_TOP_K),
        }))
    }

    fn attempt(&self, body: &Value, labels: &[char]) -> Result<HashMap<char, f64>, Failure> {
        let mut call = self.agent.post(&self.endpoint());
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => Failure::Retry(BackendError::Timeout { attempts: 0 }),
            ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
                Failure::Retry(BackendError::Unreachable {
                    attempts: 0,
                    message: e.to_string(),
                })
            }
            other => Failure::Fatal(BackendError::Malformed(other.to_string())),
        })?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retry(BackendError::Unreachable {
                attempts: 0,
                message: format!("HTTP {status}"),
            }));
        }
        if status >= 400 {
            return Err(Failure::Fatal(BackendError::Malformed(format!("HTTP {status}"))));
        }
        let value: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| Failure::Fatal(BackendError::Malformed(e.to_string())))?;
        parse_top_logprobs(&value, labels).map_err(Failure::Fatal)
    }
}

impl Backend for HttpBackend {
    fn label_scores(&self, request: &BackendRequest) -> Result<HashMap<char, f64>, BackendError> {
        let body = self.request_body(request)?;
        let attempts = self.config.retries + 1;
        let mut last = None;
        for attempt in 1..=attempts {
            match self.attempt(&body, request.labels()) {
                Ok(scores) => return Ok(scores),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(e)) => {
                    log::warn!("attempt {attempt}/{attempts} failed: {e}");
                    last = Some(e);
                    if attempt < attempts {
                        std::thread::sleep(self.config.retry_delay);
                    }
                }
            }
        }
        Err(match last {
            Some(BackendError::Timeout { .. }) => BackendError::Timeout { attempts },
            Some(BackendError::Unreachable { message, .. }) => BackendError::Unreachable { attempts, message },
            Some(other) => other,
            None => BackendError::Unreachable {
                attempts,
                message: "no attempt made".into(),
            },
        })
    }
}
