//! Chat-completion client over a pluggable transport, with cassette record/replay.

use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited by endpoint")]
    RateLimited,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("script has no entry for turn {0}")]
    ScriptExhausted(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the api key.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt-4".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            max_retries: 2,
            retry_backoff_ms: 500,
            timeout_secs: 60,
        }
    }
}

impl LlmConfig {
    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub url: String,
    pub body: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpReply {
    pub status: u16,
    pub body: serde_json::Value,
}

pub trait Transport: Send + Sync {
    fn send(&self, req: &HttpRequest) -> Result<HttpReply, BackendError>;
}

pub struct HttpTransport {
    api_key_env: String,
    timeout: Duration,
    client: OnceLock<reqwest::blocking::Client>,
}

impl HttpTransport {
    pub fn new(config: &LlmConfig) -> Self {
        HttpTransport {
            api_key_env: config.api_key_env.clone(),
            timeout: Duration::from_secs(config.timeout_secs),
            client: OnceLock::new(),
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &HttpRequest) -> Result<HttpReply, BackendError> {
        let client = self.client.get_or_init(|| {
            reqwest::blocking::Client::builder().timeout(self.timeout).build().expect("http client builds")
        });
        let mut rb = client.post(&req.url).json(&req.body);
        if let Ok(key) = std::env::var(&self.api_key_env) {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        let body = serde_json::from_str(&text).unwrap_or(serde_json::Value::String(text));
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub request: HttpRequest,
    pub response: HttpReply,
}

/// Replays recorded interactions by exact request match, or records through an inner transport.
pub struct CassetteTransport {
    entries: Mutex<Vec<Interaction>>,
    record: Option<(Arc<dyn Transport>, PathBuf)>,
}

impl CassetteTransport {
    pub fn replay(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: Interaction = serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            entries.push(e);
        }
        Ok(CassetteTransport { entries: Mutex::new(entries), record: None })
    }

    pub fn from_entries(entries: Vec<Interaction>) -> Self {
        CassetteTransport { entries: Mutex::new(entries), record: None }
    }

    pub fn recording(inner: Arc<dyn Transport>, path: PathBuf) -> Self {
        CassetteTransport { entries: Mutex::new(Vec::new()), record: Some((inner, path)) }
    }
}

impl Transport for CassetteTransport {
    fn send(&self, req: &HttpRequest) -> Result<HttpReply, BackendError> {
        if let Some((inner, path)) = &self.record {
            let response = inner.send(req)?;
            let entry = Interaction { request: req.clone(), response: response.clone() };
            let line = serde_json::to_string(&entry).expect("interaction serializes");
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| BackendError::Transport(format!("cassette write: {e}")))?;
            writeln!(f, "{line}").map_err(|e| BackendError::Transport(format!("cassette write: {e}")))?;
            self.entries.lock().expect("cassette lock").push(entry);
            return Ok(response);
        }
        let entries = self.entries.lock().expect("cassette lock");
        entries
            .iter()
            .find(|e| e.request == *req)
            .map(|e| e.response.clone())
            .ok_or_else(|| BackendError::Transport("no cassette entry matches the request".into()))
    }
}

#[derive(Clone)]
pub struct LlmClient {
    pub config: LlmConfig,
    transport: Arc<dyn Transport>,
}

impl LlmClient {
    pub fn new(config: LlmConfig, transport: Arc<dyn Transport>) -> Self {
        LlmClient { config, transport }
    }

    pub fn http(config: LlmConfig) -> Self {
        let t = Arc::new(HttpTransport::new(&config));
        LlmClient { config, transport: t }
    }

    pub fn request(&self, system: &str, user: &str) -> HttpRequest {
        HttpRequest {
            url: self.config.endpoint(),
            body: serde_json::json!({
                "model": self.config.model,
                "messages": [
                    {"role": "system", "content": system},
                    {"role": "user", "content": user},
                ],
                "temperature": self.config.temperature,
            }),
        }
    }

    pub fn chat(&self, system: &str, user: &str) -> Result<String, BackendError> {
        let req = self.request(system, user);
        let mut attempt = 0;
        loop {
            let outcome = self.transport.send(&req).and_then(|reply| match reply.status {
                200..=299 => reply.body["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into())),
                429 => Err(BackendError::RateLimited),
                s => Err(BackendError::Transport(format!("endpoint returned status {s}"))),
            });
            match outcome {
                Err(BackendError::Transport(_) | BackendError::RateLimited) if attempt < self.config.max_retries => {
                    attempt += 1;
                    std::thread::sleep(Duration::from_millis(self.config.retry_backoff_ms * attempt as u64));
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
        status: u16,
    }

    impl Transport for Flaky {
        fn send(&self, _req: &HttpRequest) -> Result<HttpReply, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Ok(HttpReply { status: self.status, body: serde_json::json!({}) });
            }
            Ok(HttpReply {
                status: 200,
                body: serde_json::json!({"choices": [{"message": {"content": "ok"}}]}),
            })
        }
    }

    fn cfg() -> LlmConfig {
        LlmConfig { retry_backoff_ms: 0, ..LlmConfig::default() }
    }

    #[test]
    fn retries_rate_limits_then_succeeds() {
        let t = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first: 2, status: 429 });
        let c = LlmClient::new(cfg(), t.clone());
        assert_eq!(c.chat("s", "u").unwrap(), "ok");
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let t = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first: 10, status: 429 });
        let c = LlmClient::new(cfg(), t);
        assert_eq!(c.chat("s", "u"), Err(BackendError::RateLimited));
    }

    #[test]
    fn malformed_body_is_not_retried() {
        struct Bad;
        impl Transport for Bad {
            fn send(&self, _: &HttpRequest) -> Result<HttpReply, BackendError> {
                Ok(HttpReply { status: 200, body: serde_json::json!({"nope": 1}) })
            }
        }
        let c = LlmClient::new(cfg(), Arc::new(Bad));
        assert!(matches!(c.chat("s", "u"), Err(BackendError::MalformedResponse(_))));
    }

    #[test]
    fn request_body_carries_temperature() {
        let c = LlmClient::new(cfg().with_temperature(0.7), Arc::new(CassetteTransport::from_entries(vec![])));
        let req = c.request("sys", "usr");
        assert_eq!(req.body["temperature"], serde_json::json!(0.7));
        assert_eq!(req.body["messages"][1]["content"], "usr");
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let config = LlmConfig { base_url: "http://127.0.0.1:9".into(), max_retries: 0, timeout_secs: 2, ..cfg() };
        let c = LlmClient::http(config);
        assert!(matches!(c.chat("s", "u"), Err(BackendError::Transport(_))));
    }

    #[test]
    fn cassette_records_then_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let inner = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first: 0, status: 200 });
        let rec = LlmClient::new(cfg(), Arc::new(CassetteTransport::recording(inner, path.clone())));
        assert_eq!(rec.chat("s", "u").unwrap(), "ok");
        let rep = LlmClient::new(cfg(), Arc::new(CassetteTransport::replay(&path).unwrap()));
        assert_eq!(rep.chat("s", "u").unwrap(), "ok");
        assert!(matches!(rep.chat("s", "other"), Err(BackendError::Transport(_))));
    }
}
